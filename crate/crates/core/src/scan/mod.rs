//! SCAN: command language, interpreter, benchmark splits and dataset files.

mod grammar;
mod io;
mod split;
mod vocab;

pub use grammar::{
    enumerate_commands, interpret, Action, ActionSequence, ScanCommand, SOURCE_WORDS,
};
pub use io::{parse_line, read_dataset, write_dataset, write_split};
pub use split::{build_split, upsample_command, Split, SplitName, SplitSpec};
pub use vocab::{build_vocab, Vocab, BOS, EOS, PAD};

/// One command/action pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScanExample {
    pub command: ScanCommand,
    pub actions: ActionSequence,
}

impl ScanExample {
    /// Pairs a command with its interpretation.
    pub fn from_command(command: ScanCommand) -> crate::Result<Self> {
        let actions = interpret(&command)?;
        Ok(ScanExample { command, actions })
    }

    pub fn source_tokens(&self) -> Vec<String> {
        self.command.tokens().to_vec()
    }

    pub fn target_tokens(&self) -> Vec<String> {
        self.actions.actions().iter().map(|a| a.name().to_string()).collect()
    }
}
