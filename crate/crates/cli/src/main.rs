use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use scanformer::eval::{accuracy, evaluate, export_bias};
use scanformer::model::{AttentionVariant, Checkpoint, ModelConfig, Seq2Seq};
use scanformer::parallel::Exec;
use scanformer::scan::{
    build_split, build_vocab, read_dataset, upsample_command, write_split, ScanExample, SplitName, SplitSpec, Vocab,
};
use scanformer::tensor::grad_check_params;
use scanformer::train::{encode_examples, fit, grid_run, FitOptions, GridSpec, RunDir, TrainConfig};

#[derive(Parser)]
#[command(name = "scanformer", version, about = "Seq2seq Transformer variants on SCAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a SCAN split as `<split>.train.txt` and `<split>.test.txt`.
    GenData {
        #[arg(long)]
        split: SplitName,
        #[arg(long)]
        out: PathBuf,
        /// Shuffle seed for the random split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        /// Repeat the isolated `jump` example this many times in train.
        #[arg(long)]
        upsample_jump: Option<usize>,
    },
    /// Train one model.
    Train(TrainArgs),
    /// Train every cell of a grid with every seed.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Grid axes as JSON.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Decode a test set with one checkpoint per seed.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: SplitName,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequential: bool,
    },
    /// Write relative-bias preference files of a sag_t5 checkpoint.
    ExportBias {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare model gradients with finite differences on one batch.
    GradCheck {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

#[derive(Args, Default)]
struct ModelFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<AttentionVariant>,
    #[arg(long)]
    span: Option<usize>,
    /// Initial gate value for encoder and decoder.
    #[arg(long, allow_hyphen_values = true)]
    beta0: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
}

#[derive(Args)]
struct Common {
    #[command(flatten)]
    model: ModelFlags,
    /// JSON with optional `model`, `train` and `grid` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding `<split>.train.txt` and `<split>.test.txt`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: SplitName,
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Report test accuracy on stderr every this many epochs.
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ConfigFile {
    model: ModelConfig,
    train: TrainConfig,
    grid: GridSpec,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    let cfg: ConfigFile = serde_json::from_str(&text).with_context(|| format!("{}", path.display()))?;
    Ok(cfg)
}

impl ModelFlags {
    fn apply(&self, cfg: &mut ModelConfig) {
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(s) = self.span {
            cfg.span = s;
            if cfg.variant == AttentionVariant::SagConv {
                cfg.kernel_size = 2 * s + 1;
            }
        }
        if let Some(b) = self.beta0 {
            cfg.beta0_encoder = b;
            cfg.beta0_decoder = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        for (flag, field) in [
            (self.layers, &mut cfg.layers),
            (self.heads, &mut cfg.heads),
            (self.embed_dim, &mut cfg.embed_dim),
            (self.ffn_dim, &mut cfg.ffn_dim),
        ] {
            if let Some(v) = flag {
                *field = v;
            }
        }
    }
}

struct Prepared {
    cfg: ConfigFile,
    train: Vec<ScanExample>,
    test: Vec<ScanExample>,
    src: Vocab,
    tgt: Vocab,
    exec: Exec,
}

fn split_files(dir: &Path, split: SplitName) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{split}.train.txt")),
        dir.join(format!("{split}.test.txt")),
    )
}

fn prepare(c: &Common) -> Result<Prepared> {
    let mut cfg = load_config(c.config.as_deref())?;
    c.model.apply(&mut cfg.model);
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = c.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = c.lr {
        cfg.train.lr = lr;
    }
    let (train_path, test_path) = split_files(&c.data, c.split);
    let train = read_dataset(&train_path)?;
    let test = read_dataset(&test_path)?;
    let all: Vec<ScanExample> = train.iter().chain(&test).cloned().collect();
    let (src, tgt) = build_vocab(&all)?;
    cfg.model.src_vocab = src.len();
    cfg.model.tgt_vocab = tgt.len();
    cfg.model.validate()?;
    cfg.train.validate()?;
    let exec = if c.sequential { Exec::Sequential } else { Exec::Parallel };
    Ok(Prepared {
        cfg,
        train,
        test,
        src,
        tgt,
        exec,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            split,
            out,
            seed,
            train_fraction,
            upsample_jump,
        } => {
            let mut data = build_split(&SplitSpec {
                name: split,
                train_fraction,
                seed,
            })?;
            if let Some(n) = upsample_jump {
                upsample_command(&mut data.train, "jump", n);
            }
            let (a, b) = write_split(&out, &data)?;
            println!("{}\t{} examples", a.display(), data.train.len());
            println!("{}\t{} examples", b.display(), data.test.len());
        }
        Command::Train(TrainArgs { common, eval_every }) => {
            let p = prepare(&common)?;
            let train = encode_examples(&p.train, &p.src, &p.tgt)?;
            let test = encode_examples(&p.test, &p.src, &p.tgt)?;
            let mut model = Seq2Seq::new(p.cfg.model.clone())?;
            let dir = RunDir::create(&common.runs, &p.cfg.model, &p.cfg.train)?;
            let exec = p.exec;
            let mut hook = |epoch: usize, m: &Seq2Seq| -> scanformer::Result<bool> {
                if eval_every.is_some_and(|n| n > 0 && epoch.is_multiple_of(n)) && !test.is_empty() {
                    eprintln!("epoch {epoch}: test accuracy {:.4}", accuracy(m, &test, exec)?);
                }
                Ok(true)
            };
            let mut record = fit(
                &mut model,
                &train,
                &p.cfg.train,
                FitOptions {
                    exec: p.exec,
                    run_dir: Some(&dir),
                    vocabs: Some((&p.src, &p.tgt)),
                    on_epoch: Some(&mut hook),
                },
            )?;
            if !test.is_empty() {
                record.test_accuracy = Some(accuracy(&model, &test, p.exec)?);
                dir.write_record(&record)?;
            }
            println!("{}", serde_json::to_string(&record_summary(&dir, &record))?);
        }
        Command::Grid { common, grid } => {
            let p = prepare(&common)?;
            let spec = match grid {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("{}", path.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("{}", path.display()))?
                }
                None => p.cfg.grid.clone(),
            };
            let train = encode_examples(&p.train, &p.src, &p.tgt)?;
            let test = encode_examples(&p.test, &p.src, &p.tgt)?;
            let report = grid_run(
                &p.cfg.model,
                &spec,
                &p.cfg.train,
                &train,
                &test,
                Some((&p.src, &p.tgt)),
                Some(&common.runs),
                p.exec,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Eval {
            checkpoints,
            data,
            split,
            out,
            sequential,
        } => {
            for c in &checkpoints {
                if !c.is_file() {
                    bail!("checkpoint not found: {}", c.display());
                }
            }
            let (_, test_path) = split_files(&data, split);
            let test = read_dataset(&test_path)?;
            let exec = if sequential { Exec::Sequential } else { Exec::Parallel };
            let report = evaluate(&checkpoints, &test, split.as_str(), &out, exec)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::ExportBias { checkpoint, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            for p in export_bias(&ckpt, &out)? {
                println!("{}", p.display());
            }
        }
        Command::GradCheck {
            model,
            config,
            tolerance,
        } => {
            let mut cfg = ModelConfig {
                layers: 2,
                heads: 2,
                embed_dim: 16,
                ffn_dim: 32,
                dropout: 0.0,
                attention_dropout: 0.0,
                ..load_config(config.as_deref())?.model
            };
            model.apply(&mut cfg);
            let m = Seq2Seq::new(cfg)?;
            let check = grad_check_model(&m)?;
            println!(
                "{}",
                serde_json::json!({
                    "max_rel_error": check.max_rel_error,
                    "worst_param": check.worst_param,
                    "checked": check.checked,
                })
            );
            if check.max_rel_error >= tolerance {
                bail!("gradient check failed: relative error {} >= {tolerance}", check.max_rel_error);
            }
        }
    }
    Ok(())
}

fn grad_check_model(m: &Seq2Seq) -> Result<scanformer::tensor::ParamCheck> {
    use scanformer::layers::Mode;
    use scanformer::model::EncodedPair;
    let v = m.config.tgt_vocab;
    let s = m.config.src_vocab;
    let pairs = [
        EncodedPair {
            source: vec![3 % s, 4 % s, 5 % s],
            target: vec![3 % v, 4 % v],
        },
        EncodedPair {
            source: vec![4 % s],
            target: vec![5 % v, 3 % v, 6 % v],
        },
    ];
    let refs: Vec<&EncodedPair> = pairs.iter().collect();
    Ok(grad_check_params(
        &m.params,
        |g| {
            let (loss, _) = m.batch_loss(g, &refs, 1.0, &mut Mode::eval())?;
            Ok(loss)
        },
        1e-6,
    )?)
}

fn record_summary(dir: &RunDir, record: &scanformer::train::RunRecord) -> serde_json::Value {
    serde_json::json!({
        "run_dir": dir.path,
        "config_hash": record.config_hash,
        "seed": record.seed,
        "final_loss": record.epoch_losses.last(),
        "test_accuracy": record.test_accuracy,
        "wall_time_secs": record.wall_time_secs,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
