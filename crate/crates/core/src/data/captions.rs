use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};

/// One line of a caption file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub image_id: u64,
    pub captions: Vec<String>,
}

/// An image id with its reference captions as token ids, unframed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionSample {
    pub image_id: u64,
    pub references: Vec<Vec<usize>>,
}

impl CaptionSample {
    pub fn from_entry(entry: &CaptionEntry, vocab: &Vocabulary) -> Result<Self> {
        if entry.captions.is_empty() {
            return Err(Error::Malformed {
                kind: "caption",
                detail: format!("image {} has no captions", entry.image_id),
            });
        }
        Ok(CaptionSample {
            image_id: entry.image_id,
            references: entry.captions.iter().map(|c| vocab.encode(c)).collect(),
        })
    }
}

pub fn write_captions(path: impl AsRef<Path>, entries: &[CaptionEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a JSON-lines caption file; blank lines are skipped.
pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionEntry>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Malformed {
                kind: "caption",
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
