use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::ScanExample;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<s>", "</s>"];

/// Token/id mapping with the three reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved tokens followed by `words` in sorted order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let sorted: BTreeSet<&str> = words.into_iter().collect();
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(sorted)
            .map(str::to_string)
            .collect::<Vec<_>>();
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::UnknownToken(t.as_ref().to_string()))
            })
            .collect()
    }

    /// Maps ids back to tokens, dropping the reserved ones.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i > EOS)
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }
}

/// Source and target vocabularies of a corpus.
pub fn build_vocab(examples: &[ScanExample]) -> Result<(Vocab, Vocab)> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut src = BTreeSet::new();
    let mut tgt = BTreeSet::new();
    for (i, e) in examples.iter().enumerate() {
        if e.command.is_empty() || e.actions.is_empty() {
            return Err(Error::EmptyTokens(i));
        }
        src.extend(e.command.tokens().iter().map(String::as_str));
        tgt.extend(e.actions.actions().iter().map(|a| a.name()));
    }
    Ok((Vocab::from_words(src), Vocab::from_words(tgt)))
}
