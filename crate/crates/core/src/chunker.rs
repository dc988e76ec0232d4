//! Fixed-length overlapping segmentation of publication text.
//!
//! Positions are 1-based and count Unicode scalar values. Segment `i`
//! starts at `1 + (i - 1)(s - o)` and the final segment is truncated at the
//! end of the text rather than padded.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChunkError {
    #[error("overlap {overlap} must be smaller than segment length {segment_length}")]
    Overlap {
        segment_length: usize,
        overlap: usize,
    },
    #[error("segment index is 1-based; got 0")]
    ZeroIndex,
    #[error("empty input: publication {0:?} has no text")]
    EmptyText(String),
    #[error("corpus io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkParams {
    pub segment_length: usize,
    pub overlap: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self {
            segment_length: 2000,
            overlap: 400,
        }
    }
}

impl ChunkParams {
    pub fn validate(&self) -> Result<(), ChunkError> {
        if self.overlap >= self.segment_length {
            return Err(ChunkError::Overlap {
                segment_length: self.segment_length,
                overlap: self.overlap,
            });
        }
        Ok(())
    }

    fn step(&self) -> usize {
        self.segment_length - self.overlap
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub publication_id: String,
    pub segment_index: usize,
    pub start: usize,
    pub text: String,
    pub topic_keywords: Vec<String>,
}

impl Chunk {
    /// Inclusive 1-based character span.
    pub fn span(&self) -> (usize, usize) {
        (self.start, self.start + self.text.chars().count() - 1)
    }
}

pub fn segment_start(i: usize, params: ChunkParams) -> Result<usize, ChunkError> {
    params.validate()?;
    if i == 0 {
        return Err(ChunkError::ZeroIndex);
    }
    Ok(1 + (i - 1) * params.step())
}

/// `max(1, ceil((L - o) / (s - o)))`.
pub fn segment_count(len: usize, params: ChunkParams) -> Result<usize, ChunkError> {
    params.validate()?;
    if len <= params.overlap {
        return Ok(1);
    }
    Ok((len - params.overlap).div_ceil(params.step()).max(1))
}

pub fn segment_text(
    text: &str,
    params: ChunkParams,
    publication_id: &str,
    keywords: &[String],
) -> Result<Vec<Chunk>, ChunkError> {
    params.validate()?;
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(ChunkError::EmptyText(publication_id.to_string()));
    }
    let n = segment_count(chars.len(), params)?;
    (1..=n)
        .map(|i| {
            let start = segment_start(i, params)?;
            let end = (start - 1 + params.segment_length).min(chars.len());
            Ok(Chunk {
                publication_id: publication_id.to_string(),
                segment_index: i,
                start,
                text: chars[start - 1..end].iter().collect(),
                topic_keywords: keywords.to_vec(),
            })
        })
        .collect()
}

/// Inverse of [`segment_text`]: drops the leading overlap of every chunk
/// after the first.
pub fn reconstruct(chunks: &[Chunk], overlap: usize) -> String {
    let mut out = String::new();
    for (i, c) in chunks.iter().enumerate() {
        if i == 0 {
            out.push_str(&c.text);
        } else {
            out.extend(c.text.chars().skip(overlap));
        }
    }
    out
}

/// One line of the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub publication_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    /// Per-keyword weights; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_weights: Option<Vec<f64>>,
}

impl CorpusRecord {
    pub fn weighted_keywords(&self) -> Vec<(String, f64)> {
        let m = self.keywords.len();
        match &self.keyword_weights {
            Some(w) if w.len() == m => self
                .keywords
                .iter()
                .cloned()
                .zip(w.iter().copied())
                .collect(),
            _ => self
                .keywords
                .iter()
                .map(|k| (k.clone(), 1.0 / m as f64))
                .collect(),
        }
    }
}

/// Reads line-delimited JSON records; blank lines are skipped.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<CorpusRecord>, ChunkError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| ChunkError::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>, ChunkError> {
    read_corpus(std::io::BufReader::new(std::fs::File::open(path)?))
}
