use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, clip_gradients, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::checkpoint::write_atomic;
use crate::model::{short_hash, Checkpoint, EncodedPair, ModelConfig, Seq2Seq};
use crate::parallel::Exec;
use crate::scan::{ScanExample, Vocab};
use crate::tensor::{Float, Gradients, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Examples per batch.
    pub batch_size: usize,
    /// Optional cap on target tokens per batch; batches close at whichever
    /// limit is reached first.
    pub max_tokens: Option<usize>,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seeds: Vec<u64>,
    /// Checkpoint cadence in epochs; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// Examples per gradient shard. Shards are the unit of parallel work
    /// and each draws its own dropout stream, so this value (not the thread
    /// count) determines the result.
    pub shard_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            max_tokens: None,
            epochs: 250,
            clip_norm: 1.0,
            seeds: vec![0, 1, 2],
            checkpoint_every: 25,
            shard_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("clip_norm", self.clip_norm),
            ("batch_size", self.batch_size as f64),
            ("shard_size", self.shard_size as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.max_tokens == Some(0) {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Maps examples to id sequences.
pub fn encode_examples(examples: &[ScanExample], src: &Vocab, tgt: &Vocab) -> Result<Vec<EncodedPair>> {
    examples
        .iter()
        .map(|e| {
            Ok(EncodedPair {
                source: src.encode(&e.source_tokens())?,
                target: tgt.encode(&e.target_tokens())?,
            })
        })
        .collect()
}

fn stream(seed: u64, epoch: u64, tag: &[u8; 8]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[24..].copy_from_slice(tag);
    ChaCha8Rng::from_seed(key)
}

/// Length-bucketed batches for one epoch: a seeded shuffle, a stable sort
/// by length (so equal lengths stay shuffled), consecutive slicing, then a
/// seeded shuffle of batch order.
pub fn make_batches(
    pairs: &[EncodedPair],
    batch_size: usize,
    max_tokens: Option<usize>,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    let mut rng = stream(seed, epoch, b"batching");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (pairs[i].target.len(), pairs[i].source.len()));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = pairs[i].target.len() + 1;
        let full = cur.len() == batch_size || max_tokens.is_some_and(|m| !cur.is_empty() && tokens + n > m);
        if full {
            batches.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(&mut rng);
    batches
}

/// Token-averaged loss of a batch and its gradient. The batch is cut into
/// `shard_size` pieces that are differentiated independently (possibly in
/// parallel) and summed in order.
pub fn batch_gradients(
    model: &Seq2Seq,
    batch: &[&EncodedPair],
    seed: u64,
    step: u64,
    shard_size: usize,
    exec: Exec,
) -> Result<(f64, Gradients)> {
    let tokens: usize = batch.iter().map(|p| p.target.len() + 1).sum();
    let weight = 1.0 / tokens.max(1) as Float;
    let shards: Vec<&[&EncodedPair]> = batch.chunks(shard_size.max(1)).collect();
    let parts = exec.map(&shards, |i, shard| -> Result<(f64, Gradients)> {
        let mut g = Graph::with_params(&model.params);
        let mut mode = Mode::train(seed, step, i as u64);
        let (loss, _) = model.batch_loss(&mut g, shard, weight, &mut mode)?;
        let value = g.value(loss).item() as f64;
        g.backward(loss)?;
        let mut grads = Gradients::zeros_like(&model.params);
        g.accumulate_param_grads(&mut grads);
        Ok((value, grads))
    });
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(&model.params);
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        grads.accumulate(&g);
    }
    Ok((total, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    /// Token-weighted mean loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub test_accuracy: Option<f64>,
    pub wall_time_secs: f64,
}

#[derive(Serialize)]
struct RunConfigText<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

/// Hash identifying a configuration independently of its seed.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let model = ModelConfig {
        seed: 0,
        ..model.clone()
    };
    let train = TrainConfig {
        seeds: Vec::new(),
        ..train.clone()
    };
    short_hash(&serde_json::to_string_pretty(&RunConfigText { model: &model, train: &train }).unwrap())
}

/// `<root>/<config-hash>/<seed>/` with the config, checkpoints, a metrics
/// log and the final record.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub hash: String,
}

impl RunDir {
    pub fn create(root: &Path, model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let hash = config_hash(model, train);
        let path = root.join(&hash).join(model.seed.to_string());
        fs::create_dir_all(&path).map_err(Error::file(&path))?;
        let text = serde_json::to_string_pretty(&RunConfigText { model, train })?;
        write_atomic(&path.join("config.json"), text.as_bytes())?;
        let metrics = path.join("metrics.jsonl");
        fs::write(&metrics, "").map_err(Error::file(&metrics))?;
        Ok(RunDir { path, hash })
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.path.join(format!("epoch-{epoch:04}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.path.join("final.ckpt")
    }

    pub fn last_good_checkpoint(&self) -> PathBuf {
        self.path.join("last-good.ckpt")
    }

    pub fn record_path(&self) -> PathBuf {
        self.path.join("record.json")
    }

    fn log_epoch(&self, epoch: usize, loss: f64, wall: f64) -> Result<()> {
        let path = self.path.join("metrics.jsonl");
        let line = serde_json::json!({ "epoch": epoch, "loss": loss, "wall_time": wall });
        let mut f = OpenOptions::new().append(true).open(&path).map_err(Error::file(&path))?;
        writeln!(f, "{line}").map_err(Error::file(&path))
    }

    pub fn write_record(&self, record: &RunRecord) -> Result<()> {
        write_atomic(&self.record_path(), serde_json::to_string_pretty(record)?.as_bytes())
    }
}

/// Callback after every epoch with the 1-based epoch number; returning
/// `false` ends training early.
pub type EpochHook<'a> = dyn FnMut(usize, &Seq2Seq) -> Result<bool> + 'a;

#[derive(Default)]
pub struct FitOptions<'a> {
    pub exec: Exec,
    pub run_dir: Option<&'a RunDir>,
    /// Stored in checkpoints so they can be evaluated standalone.
    pub vocabs: Option<(&'a Vocab, &'a Vocab)>,
    pub on_epoch: Option<&'a mut EpochHook<'a>>,
}

/// Trains `model` in place for `cfg.epochs` epochs with dropout, gradient
/// clipping and Adam. Shuffling and dropout are seeded by the model seed.
pub fn fit(model: &mut Seq2Seq, data: &[EncodedPair], cfg: &TrainConfig, mut opts: FitOptions<'_>) -> Result<RunRecord> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let start = Instant::now();
    let seed = model.config.seed;
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.params);
    let mut record = RunRecord {
        config_hash: config_hash(&model.config, cfg),
        seed,
        epoch_losses: Vec::new(),
        step_losses: Vec::new(),
        test_accuracy: None,
        wall_time_secs: 0.0,
    };
    let save = |model: &Seq2Seq, state: &AdamState, path: &Path| {
        let (src, tgt) = opts.vocabs.unzip();
        Checkpoint::from_model(model, src, tgt, state.step, Some(state)).save(path)
    };
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(data, cfg.batch_size, cfg.max_tokens, seed, epoch as u64);
        let mut weighted = 0.0;
        let mut tokens = 0usize;
        for batch in batches {
            let batch: Vec<&EncodedPair> = batch.iter().map(|&i| &data[i]).collect();
            let step = state.step;
            let outcome = batch_gradients(model, &batch, seed, step, cfg.shard_size, opts.exec).and_then(
                |(loss, mut grads)| {
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss { step });
                    }
                    clip_gradients(&model.params, &mut grads, cfg.clip_norm)?;
                    Ok((loss, grads))
                },
            );
            let (loss, grads) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    if let Some(dir) = opts.run_dir {
                        save(model, &state, &dir.last_good_checkpoint())?;
                    }
                    return Err(e);
                }
            };
            adam_step(&mut model.params, &grads, &mut state, &adam)?;
            let n: usize = batch.iter().map(|p| p.target.len() + 1).sum();
            weighted += loss * n as f64;
            tokens += n;
            record.step_losses.push(loss);
        }
        let epoch_loss = weighted / tokens as f64;
        record.epoch_losses.push(epoch_loss);
        let wall = start.elapsed().as_secs_f64();
        if let Some(dir) = opts.run_dir {
            dir.log_epoch(epoch, epoch_loss, wall)?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save(model, &state, &dir.checkpoint_path(epoch))?;
            }
        }
        if let Some(hook) = opts.on_epoch.as_mut() {
            if !hook(epoch, model)? {
                break;
            }
        }
    }
    record.wall_time_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = opts.run_dir {
        save(model, &state, &dir.final_checkpoint())?;
        dir.write_record(&record)?;
    }
    Ok(record)
}
