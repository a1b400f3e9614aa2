use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::EPassage;
use crate::error::{Error, Result};

/// Writes one JSON record per line.
pub fn write_dataset<W: Write>(mut w: W, passages: &[EPassage]) -> Result<()> {
    for p in passages {
        let line = serde_json::to_string(p).map_err(|e| Error::Io(e.into()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads line-delimited records. Blank lines are skipped; a malformed line
/// yields a parse error carrying its 1-based line number.
pub fn read_dataset<R: Read>(r: R) -> Result<Vec<EPassage>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, passages: &[EPassage]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), passages)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<EPassage>> {
    read_dataset(File::open(path)?)
}
