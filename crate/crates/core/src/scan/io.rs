use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{ActionSequence, ScanCommand, ScanExample, Split};
use crate::error::{Error, Result};

/// Parses `IN: <command> OUT: <actions>`.
pub fn parse_line(line: &str, line_no: usize) -> Result<ScanExample> {
    let bad = |message: &str| Error::Dataset {
        line: line_no,
        message: message.to_string(),
    };
    let rest: &str = line
        .trim_end()
        .strip_prefix("IN:")
        .ok_or_else(|| bad("missing `IN:`"))?;
    let (cmd, actions) = rest.split_once(" OUT:").ok_or_else(|| bad("missing `OUT:`"))?;
    let command: ScanCommand = cmd.parse().map_err(|e: Error| bad(&e.to_string()))?;
    let actions: ActionSequence = actions.parse().map_err(|e: Error| bad(&e.to_string()))?;
    if actions.is_empty() {
        return Err(bad("empty action sequence"));
    }
    Ok(ScanExample { command, actions })
}

pub fn write_dataset(path: &Path, examples: &[ScanExample]) -> Result<()> {
    let file = fs::File::create(path).map_err(Error::file(path))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        writeln!(w, "IN: {} OUT: {}", e.command, e.actions).map_err(Error::file(path))?;
    }
    w.flush().map_err(Error::file(path))?;
    Ok(())
}

/// Reads a dataset file; blank lines are skipped, line numbers are 1-based.
pub fn read_dataset(path: &Path) -> Result<Vec<ScanExample>> {
    let file = fs::File::open(path).map_err(Error::file(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::file(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

/// Writes `<name>.train.txt` and `<name>.test.txt` into `dir`.
pub fn write_split(dir: &Path, split: &Split) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(Error::file(dir))?;
    let train = dir.join(format!("{}.train.txt", split.name));
    let test = dir.join(format!("{}.test.txt", split.name));
    write_dataset(&train, &split.train)?;
    write_dataset(&test, &split.test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::Action;

    #[test]
    fn canonical_line() {
        let e = parse_line("IN: jump OUT: JUMP", 1).unwrap();
        assert_eq!(e.command.to_string(), "jump");
        assert_eq!(e.actions.actions(), &[Action::Jump]);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let err = parse_line("IN: jump JUMP", 7).unwrap_err();
        assert!(matches!(err, Error::Dataset { line: 7, .. }), "{err}");
        assert!(parse_line("jump OUT: JUMP", 1).is_err());
        assert!(parse_line("IN: jump OUT: HOP", 1).is_err());
        assert!(parse_line("IN: jump OUT:", 1).is_err());
    }

    #[test]
    fn read_reports_line_of_first_bad_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        fs::write(&p, "IN: jump OUT: JUMP\nIN: walk WALK\n").unwrap();
        let err = read_dataset(&p).unwrap_err();
        assert!(matches!(err, Error::Dataset { line: 2, .. }));
    }
}
