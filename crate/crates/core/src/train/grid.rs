use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fit::{config_hash, fit, FitOptions, RunDir, TrainConfig};
use crate::error::Result;
use crate::eval::{accuracy, mean_sem};
use crate::model::{AttentionVariant, EncodedPair, ModelConfig, Seq2Seq};
use crate::parallel::Exec;
use crate::scan::Vocab;

/// Axes of a hyperparameter grid. An empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub variants: Vec<AttentionVariant>,
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub embed_dim: Vec<usize>,
    pub ffn_dim: Vec<usize>,
    /// Attention span; for `sag_conv` a span `s` means kernel width `2s + 1`.
    pub span: Vec<usize>,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl GridSpec {
    /// Cartesian product of the axes applied to `base`, in axis order.
    pub fn expand(&self, base: &ModelConfig) -> Result<Vec<ModelConfig>> {
        let mut out = Vec::new();
        for variant in axis(&self.variants, base.variant) {
            for layers in axis(&self.layers, base.layers) {
                for heads in axis(&self.heads, base.heads) {
                    for embed_dim in axis(&self.embed_dim, base.embed_dim) {
                        for ffn_dim in axis(&self.ffn_dim, base.ffn_dim) {
                            for span in axis(&self.span, base.span) {
                                let kernel_size = if variant == AttentionVariant::SagConv && !self.span.is_empty() {
                                    2 * span + 1
                                } else {
                                    base.kernel_size
                                };
                                let cfg = ModelConfig {
                                    variant,
                                    layers,
                                    heads,
                                    embed_dim,
                                    ffn_dim,
                                    span,
                                    kernel_size,
                                    ..base.clone()
                                };
                                cfg.validate()?;
                                out.push(cfg);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub config: ModelConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub sem: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    /// Index of the cell with the highest mean accuracy (first on ties).
    pub best: usize,
}

/// Trains every grid cell with every seed and scores it on `test`.
#[allow(clippy::too_many_arguments)]
pub fn grid_run(
    base: &ModelConfig,
    spec: &GridSpec,
    train_cfg: &TrainConfig,
    train: &[EncodedPair],
    test: &[EncodedPair],
    vocabs: Option<(&Vocab, &Vocab)>,
    runs_root: Option<&Path>,
    exec: Exec,
) -> Result<GridReport> {
    train_cfg.validate()?;
    let mut cells = Vec::new();
    for cfg in spec.expand(base)? {
        let mut accuracies = Vec::new();
        for &seed in &train_cfg.seeds {
            let cfg = ModelConfig { seed, ..cfg.clone() };
            let mut model = Seq2Seq::new(cfg.clone())?;
            let dir = runs_root.map(|r| RunDir::create(r, &cfg, train_cfg)).transpose()?;
            let acc = {
                let opts = FitOptions {
                    exec,
                    run_dir: dir.as_ref(),
                    vocabs,
                    on_epoch: None,
                };
                let mut record = fit(&mut model, train, train_cfg, opts)?;
                let acc = accuracy(&model, test, exec)?;
                record.test_accuracy = Some(acc);
                if let Some(dir) = &dir {
                    dir.write_record(&record)?;
                }
                acc
            };
            accuracies.push(acc);
        }
        let (mean, sem) = mean_sem(&accuracies);
        cells.push(GridCell {
            config_hash: config_hash(&cfg, train_cfg),
            config: cfg,
            seeds: train_cfg.seeds.clone(),
            accuracies,
            mean,
            sem,
        });
    }
    let mut best = 0;
    for (i, c) in cells.iter().enumerate() {
        if c.mean > cells[best].mean {
            best = i;
        }
    }
    Ok(GridReport { cells, best })
}
