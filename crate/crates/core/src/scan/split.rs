use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{enumerate_commands, ScanExample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Simple,
    Jump,
    AroundRight,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Simple => "simple",
            SplitName::Jump => "jump",
            SplitName::AroundRight => "around-right",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(SplitName::Simple),
            "jump" => Ok(SplitName::Jump),
            "around-right" | "around_right" => Ok(SplitName::AroundRight),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub name: SplitName,
    /// Share of commands assigned to train; only read by the simple split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(name: SplitName) -> Self {
        SplitSpec {
            name,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: SplitName,
    pub train: Vec<ScanExample>,
    pub test: Vec<ScanExample>,
}

/// Partitions the full command set. Both halves come back in lexicographic
/// order of their commands.
pub fn build_split(spec: &SplitSpec) -> Result<Split> {
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Config(format!(
            "train fraction {} outside [0, 1]",
            spec.train_fraction
        )));
    }
    let corpus = enumerate_commands()
        .into_iter()
        .map(ScanExample::from_command)
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = match spec.name {
        SplitName::Simple => {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            let n_train = (spec.train_fraction * corpus.len() as f64).round() as usize;
            let mut in_train = vec![false; corpus.len()];
            order[..n_train].iter().for_each(|&i| in_train[i] = true);
            let (train, test): (Vec<_>, Vec<_>) = corpus
                .into_iter()
                .zip(in_train)
                .partition(|(_, keep)| *keep);
            (
                train.into_iter().map(|(e, _)| e).collect(),
                test.into_iter().map(|(e, _)| e).collect(),
            )
        }
        SplitName::Jump => corpus.into_iter().partition(|e| {
            !e.command.contains("jump") || e.command.tokens() == ["jump"]
        }),
        SplitName::AroundRight => corpus
            .into_iter()
            .partition(|e| !e.command.contains_bigram("around", "right")),
    };
    Ok(Split {
        name: spec.name,
        train,
        test,
    })
}

/// Repeats every example whose command equals `command` until it occurs
/// `times` times in total.
pub fn upsample_command(examples: &mut Vec<ScanExample>, command: &str, times: usize) {
    let matches: Vec<ScanExample> = examples
        .iter()
        .filter(|e| e.command.to_string() == command)
        .cloned()
        .collect();
    for e in &matches {
        for _ in 1..times {
            examples.push(e.clone());
        }
    }
}
