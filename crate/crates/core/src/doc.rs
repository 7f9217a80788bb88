//! Corpus documents and their line-delimited JSON serialization.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::text::{self, CharStats};
use crate::{Error, Result};

/// One corpus item flowing through the filter/clean/dedup stages.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub source: String,
    #[serde(skip)]
    pub word_count: usize,
    #[serde(skip)]
    pub char_stats: CharStats,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source: impl Into<String>) -> Self {
        let text = text.into();
        let word_count = text::word_count(&text);
        let char_stats = CharStats::of(&text);
        Document {
            id: id.into(),
            text,
            source: source.into(),
            word_count,
            char_stats,
        }
    }

    /// Recompute the derived stats after the text was rewritten.
    pub fn refresh(&mut self) {
        self.word_count = text::word_count(&self.text);
        self.char_stats = CharStats::of(&self.text);
    }
}

/// Reads a line-delimited corpus: one JSON record {id, text, source} per line.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut doc: Document = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        doc.refresh();
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_jsonl<W: Write>(mut writer: W, docs: &[Document]) -> Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut writer, doc)?;
        writeln!(writer)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let docs = vec![
            Document::new("a", "नमस्ते दुनिया।", "web"),
            Document::new("b", "line\nbreak \"quoted\"", "news"),
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &docs).unwrap();
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(docs, back);
        assert_eq!(back[0].word_count, 2);
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(read_jsonl("not json\n".as_bytes()).is_err());
    }
}
