//! The SCAN command language: parsing, interpretation and enumeration.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every word the command grammar can produce.
pub const SOURCE_WORDS: [&str; 13] = [
    "walk", "look", "run", "jump", "turn", "left", "right", "opposite", "around", "twice",
    "thrice", "and", "after",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Walk,
    Look,
    Run,
    Jump,
    LTurn,
    RTurn,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Walk,
        Action::Look,
        Action::Run,
        Action::Jump,
        Action::LTurn,
        Action::RTurn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::Walk => "WALK",
            Action::Look => "LOOK",
            Action::Run => "RUN",
            Action::Jump => "JUMP",
            Action::LTurn => "LTURN",
            Action::RTurn => "RTURN",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownToken(s.to_string()))
    }
}

/// A command as a token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScanCommand {
    tokens: Vec<String>,
}

impl ScanCommand {
    /// Wraps tokens after checking they parse.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let cmd = ScanCommand { tokens };
        parse(&cmd.tokens)?;
        Ok(cmd)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.tokens.iter().any(|t| t == word)
    }

    pub fn contains_bigram(&self, first: &str, second: &str) -> bool {
        self.tokens
            .windows(2)
            .any(|w| w[0] == first && w[1] == second)
    }
}

impl fmt::Display for ScanCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

impl FromStr for ScanCommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScanCommand::new(s.split_whitespace().map(str::to_string).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionSequence(pub Vec<Action>);

impl ActionSequence {
    pub fn actions(&self) -> &[Action] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ActionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(a.name())?;
        }
        Ok(())
    }
}

impl FromStr for ActionSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split_whitespace()
            .map(Action::from_str)
            .collect::<Result<Vec<_>>>()
            .map(ActionSequence)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Verb {
    Walk,
    Look,
    Run,
    Jump,
    Turn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Modifier {
    Plain,
    Opposite,
    Around,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Phrase {
    verb: Verb,
    direction: Option<(Modifier, Direction)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Sentence {
    phrase: Phrase,
    repeat: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Command {
    Single(Sentence),
    And(Sentence, Sentence),
    After(Sentence, Sentence),
}

fn parse_error(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

fn verb(word: &str) -> Option<Verb> {
    Some(match word {
        "walk" => Verb::Walk,
        "look" => Verb::Look,
        "run" => Verb::Run,
        "jump" => Verb::Jump,
        "turn" => Verb::Turn,
        _ => return None,
    })
}

fn direction(word: &str) -> Option<Direction> {
    match word {
        "left" => Some(Direction::Left),
        "right" => Some(Direction::Right),
        _ => None,
    }
}

fn parse(tokens: &[String]) -> Result<Command> {
    let conj = tokens
        .iter()
        .position(|t| t == "and" || t == "after");
    match conj {
        None => Ok(Command::Single(parse_sentence(tokens, 0)?)),
        Some(at) => {
            let left = parse_sentence(&tokens[..at], 0)?;
            let right = parse_sentence(&tokens[at + 1..], at + 1)?;
            Ok(if tokens[at] == "and" {
                Command::And(left, right)
            } else {
                Command::After(left, right)
            })
        }
    }
}

fn parse_sentence(tokens: &[String], offset: usize) -> Result<Sentence> {
    let (body, repeat) = match tokens.last().map(String::as_str) {
        Some("twice") => (&tokens[..tokens.len() - 1], 2),
        Some("thrice") => (&tokens[..tokens.len() - 1], 3),
        _ => (tokens, 1),
    };
    Ok(Sentence {
        phrase: parse_phrase(body, offset)?,
        repeat,
    })
}

fn parse_phrase(tokens: &[String], offset: usize) -> Result<Phrase> {
    let Some(first) = tokens.first() else {
        return Err(parse_error(offset, "expected a verb"));
    };
    let v = verb(first).ok_or_else(|| parse_error(offset, format!("expected a verb, found `{first}`")))?;
    let expect_dir = |i: usize| -> Result<Direction> {
        match tokens.get(i) {
            Some(w) => direction(w)
                .ok_or_else(|| parse_error(offset + i, format!("expected left or right, found `{w}`"))),
            None => Err(parse_error(offset + i, "expected left or right")),
        }
    };
    let phrase = match tokens.get(1).map(String::as_str) {
        None if v == Verb::Turn => return Err(parse_error(offset + 1, "`turn` needs a direction")),
        None => Phrase {
            verb: v,
            direction: None,
        },
        Some("opposite") => Phrase {
            verb: v,
            direction: Some((Modifier::Opposite, expect_dir(2)?)),
        },
        Some("around") => Phrase {
            verb: v,
            direction: Some((Modifier::Around, expect_dir(2)?)),
        },
        Some(_) => Phrase {
            verb: v,
            direction: Some((Modifier::Plain, expect_dir(1)?)),
        },
    };
    let used = match phrase.direction {
        None => 1,
        Some((Modifier::Plain, _)) => 2,
        Some(_) => 3,
    };
    if let Some(extra) = tokens.get(used) {
        return Err(parse_error(offset + used, format!("unexpected `{extra}`")));
    }
    Ok(phrase)
}

fn turn(d: Direction) -> Action {
    match d {
        Direction::Left => Action::LTurn,
        Direction::Right => Action::RTurn,
    }
}

fn denote_phrase(p: Phrase, out: &mut Vec<Action>) {
    let act = match p.verb {
        Verb::Walk => Some(Action::Walk),
        Verb::Look => Some(Action::Look),
        Verb::Run => Some(Action::Run),
        Verb::Jump => Some(Action::Jump),
        Verb::Turn => None,
    };
    match p.direction {
        None => out.extend(act),
        Some((Modifier::Plain, d)) => {
            out.push(turn(d));
            out.extend(act);
        }
        Some((Modifier::Opposite, d)) => {
            out.extend([turn(d), turn(d)]);
            out.extend(act);
        }
        Some((Modifier::Around, d)) => {
            for _ in 0..4 {
                out.push(turn(d));
                out.extend(act);
            }
        }
    }
}

fn denote_sentence(s: Sentence, out: &mut Vec<Action>) {
    for _ in 0..s.repeat {
        denote_phrase(s.phrase, out);
    }
}

/// Maps a command to the action sequence it denotes.
pub fn interpret(cmd: &ScanCommand) -> Result<ActionSequence> {
    let mut out = Vec::new();
    match parse(cmd.tokens())? {
        Command::Single(s) => denote_sentence(s, &mut out),
        Command::And(a, b) => {
            denote_sentence(a, &mut out);
            denote_sentence(b, &mut out);
        }
        Command::After(a, b) => {
            denote_sentence(b, &mut out);
            denote_sentence(a, &mut out);
        }
    }
    Ok(ActionSequence(out))
}

fn phrases() -> Vec<Vec<&'static str>> {
    let mut out = Vec::new();
    for u in ["walk", "look", "run", "jump"] {
        out.push(vec![u]);
    }
    for x in ["walk", "look", "run", "jump", "turn"] {
        for d in ["left", "right"] {
            out.push(vec![x, d]);
            out.push(vec![x, "opposite", d]);
            out.push(vec![x, "around", d]);
        }
    }
    out
}

/// Every command of the grammar, sorted lexicographically by surface form.
pub fn enumerate_commands() -> Vec<ScanCommand> {
    let mut sentences = Vec::new();
    for p in phrases() {
        sentences.push(p.clone());
        for r in ["twice", "thrice"] {
            let mut s = p.clone();
            s.push(r);
            sentences.push(s);
        }
    }
    let mut commands: Vec<Vec<&str>> = sentences.clone();
    for a in &sentences {
        for b in &sentences {
            for conj in ["and", "after"] {
                let mut c = a.clone();
                c.push(conj);
                c.extend(b);
                commands.push(c);
            }
        }
    }
    let mut out: Vec<(String, ScanCommand)> = commands
        .into_iter()
        .map(|c| {
            let cmd = ScanCommand {
                tokens: c.into_iter().map(str::to_string).collect(),
            };
            (cmd.to_string(), cmd)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out.dedup_by(|a, b| a.0 == b.0);
    out.into_iter().map(|(_, c)| c).collect()
}
