//! Multi-collection store of chunk embeddings with exact cosine search.
//!
//! On disk each collection is one file:
//!
//! ```text
//! "ADAMVEC1" | dim: u32 LE | count: u64 LE | crc32(payload): u32 LE | payload
//! payload = count × ( meta_len: u32 LE | meta: UTF-8 JSON | dim × f32 LE )
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::{segment_text, ChunkError, ChunkParams, CorpusRecord};
use crate::embedding::{embed_all, EmbeddingBackend, EmbeddingError, EmbeddingVector};

pub const MAGIC: &[u8; 8] = b"ADAMVEC1";
const HEADER_LEN: usize = 8 + 4 + 8 + 4;
pub const FILE_EXTENSION: &str = "adamvec";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("duplicate record ({publication_id}, {segment_index}) in collection {collection}")]
    Duplicate {
        collection: String,
        publication_id: String,
        segment_index: usize,
    },
    #[error("integrity error at byte offset {offset}: {message}")]
    Integrity { offset: usize, message: String },
    #[error("invalid search parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("store io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkMeta {
    pub publication_id: String,
    pub segment_index: usize,
    pub start: usize,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    pub name: String,
    pub dimension: usize,
    pub records: Vec<(ChunkMeta, EmbeddingVector)>,
    keys: BTreeSet<(String, usize)>,
}

impl Collection {
    pub fn new(name: impl Into<String>, dimension: usize) -> Self {
        Self {
            name: name.into(),
            dimension,
            records: Vec::new(),
            keys: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, meta: ChunkMeta, vector: EmbeddingVector) -> Result<(), StoreError> {
        if vector.dimension() != self.dimension {
            return Err(StoreError::Dimension {
                expected: self.dimension,
                actual: vector.dimension(),
            });
        }
        let key = (meta.publication_id.clone(), meta.segment_index);
        if self.keys.contains(&key) {
            return Err(StoreError::Duplicate {
                collection: self.name.clone(),
                publication_id: key.0,
                segment_index: key.1,
            });
        }
        self.keys.insert(key);
        self.records.push((meta, vector));
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for (meta, v) in &self.records {
            let json = serde_json::to_vec(meta).expect("metadata serializes");
            payload.extend_from_slice(&(json.len() as u32).to_le_bytes());
            payload.extend_from_slice(&json);
            for x in &v.values {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a collection file. With `expected_dimension` set, a store of
    /// any other dimension is rejected.
    pub fn from_bytes(
        name: &str,
        bytes: &[u8],
        expected_dimension: Option<usize>,
    ) -> Result<Self, StoreError> {
        let bad = |offset: usize, message: &str| StoreError::Integrity {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(bytes.len(), "truncated header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad(0, "bad magic"));
        }
        let dimension = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let checksum = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
        if let Some(expected) = expected_dimension {
            if expected != dimension {
                return Err(StoreError::Dimension {
                    expected,
                    actual: dimension,
                });
            }
        }
        let payload = &bytes[HEADER_LEN..];
        if crc32fast::hash(payload) != checksum {
            return Err(bad(20, "checksum mismatch"));
        }
        let mut c = Collection::new(name, dimension);
        let mut pos = HEADER_LEN;
        for _ in 0..count {
            let take = |pos: usize, n: usize| {
                bytes
                    .get(pos..pos + n)
                    .ok_or_else(|| bad(pos, "truncated record"))
            };
            let meta_len = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
            pos += 4;
            let meta: ChunkMeta = serde_json::from_slice(take(pos, meta_len)?)
                .map_err(|e| bad(pos, &format!("bad metadata: {e}")))?;
            pos += meta_len;
            let raw = take(pos, 4 * dimension)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let record_at = pos;
            pos += 4 * dimension;
            c.push(meta, EmbeddingVector { values })
                .map_err(|e| bad(record_at, &e.to_string()))?;
        }
        if pos != bytes.len() {
            return Err(bad(pos, "trailing bytes after last record"));
        }
        Ok(c)
    }
}

/// Named collections; iteration is in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CollectionSet {
    pub collections: BTreeMap<String, Collection>,
}

impl CollectionSet {
    pub fn total_records(&self) -> usize {
        self.collections.values().map(Collection::len).sum()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.collections.values().next().map(|c| c.dimension)
    }

    /// Writes `<dir>/<name>.adamvec` for every collection. Each file is
    /// written to a temporary name first and renamed into place.
    pub fn save(&self, dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(dir)?;
        for c in self.collections.values() {
            let path = dir.join(format!("{}.{FILE_EXTENSION}", c.name));
            let tmp = dir.join(format!(".{}.{FILE_EXTENSION}.tmp", c.name));
            std::fs::write(&tmp, c.to_bytes())?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, expected_dimension: Option<usize>) -> Result<Self, StoreError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == FILE_EXTENSION))
            .collect();
        paths.sort();
        let mut set = CollectionSet::default();
        for p in paths {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let c = Collection::from_bytes(&name, &std::fs::read(&p)?, expected_dimension)?;
            set.collections.insert(name, c);
        }
        Ok(set)
    }
}

/// Sends a document to the first collection with a matching keyword
/// (case-insensitive substring of any document keyword); otherwise to
/// `default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    pub rules: Vec<(String, Vec<String>)>,
    pub default: String,
}

impl Default for Routing {
    fn default() -> Self {
        Self {
            rules: vec![(
                "gut_brain".into(),
                vec![
                    "gut".into(),
                    "microbio".into(),
                    "microbiome".into(),
                    "gut-brain".into(),
                    "intestin".into(),
                ],
            )],
            default: "ad_literature".into(),
        }
    }
}

impl Routing {
    pub fn route(&self, keywords: &[String]) -> &str {
        let lower: Vec<String> = keywords.iter().map(|k| k.to_lowercase()).collect();
        for (name, needles) in &self.rules {
            if needles
                .iter()
                .any(|n| lower.iter().any(|k| k.contains(&n.to_lowercase())))
            {
                return name;
            }
        }
        &self.default
    }

    pub fn names(&self) -> BTreeSet<&str> {
        self.rules
            .iter()
            .map(|(n, _)| n.as_str())
            .chain([self.default.as_str()])
            .collect()
    }
}

/// Chunks, embeds and routes every record. The collections named by the
/// routing always exist, possibly empty.
pub fn index_corpus(
    corpus: &[CorpusRecord],
    params: ChunkParams,
    backend: &dyn EmbeddingBackend,
    routing: &Routing,
    batch_size: usize,
) -> Result<CollectionSet, StoreError> {
    let dim = backend.dimension();
    let mut set = CollectionSet::default();
    for name in routing.names() {
        set.collections
            .insert(name.to_string(), Collection::new(name, dim));
    }
    let chunked: Vec<Vec<ChunkMeta>> = corpus
        .par_iter()
        .map(|rec| {
            Ok(
                segment_text(&rec.text, params, &rec.publication_id, &rec.keywords)?
                    .into_iter()
                    .map(|c| ChunkMeta {
                        publication_id: c.publication_id,
                        segment_index: c.segment_index,
                        start: c.start,
                        title: rec.title.clone(),
                        text: c.text,
                        keywords: c.topic_keywords,
                    })
                    .collect(),
            )
        })
        .collect::<Result<_, StoreError>>()?;
    for (rec, metas) in corpus.iter().zip(chunked) {
        let texts: Vec<&str> = metas.iter().map(|m| m.text.as_str()).collect();
        let vectors = embed_all(backend, &texts, batch_size)?;
        let target = set
            .collections
            .get_mut(routing.route(&rec.keywords))
            .expect("routing names are precreated");
        for (m, v) in metas.into_iter().zip(vectors) {
            target.push(m, v)?;
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub collection: String,
    pub publication_id: String,
    pub segment_index: usize,
    pub similarity: f64,
    pub text: String,
}

fn hit_order(a: &RetrievalHit, b: &RetrievalHit) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.publication_id.cmp(&b.publication_id))
        .then_with(|| a.segment_index.cmp(&b.segment_index))
        .then_with(|| a.collection.cmp(&b.collection))
}

/// Top-`k` records across all collections with similarity ≥ `threshold`,
/// best first; ties by (publication id, segment index).
pub fn search(
    set: &CollectionSet,
    query: &EmbeddingVector,
    k: usize,
    threshold: f64,
) -> Result<Vec<RetrievalHit>, StoreError> {
    if k == 0 {
        return Err(StoreError::Params("k must be >= 1".into()));
    }
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(StoreError::Params(format!(
            "threshold {threshold} outside [-1, 1]"
        )));
    }
    for c in set.collections.values() {
        if c.dimension != query.dimension() {
            return Err(StoreError::Dimension {
                expected: c.dimension,
                actual: query.dimension(),
            });
        }
    }
    let mut hits: Vec<RetrievalHit> = set
        .collections
        .values()
        .flat_map(|c| c.records.iter().map(move |r| (c, r)))
        .par_bridge()
        .filter_map(|(c, (meta, v))| {
            let similarity = v.dot(query);
            (similarity >= threshold).then(|| RetrievalHit {
                collection: c.name.clone(),
                publication_id: meta.publication_id.clone(),
                segment_index: meta.segment_index,
                similarity,
                text: meta.text.clone(),
            })
        })
        .collect();
    hits.sort_by(hit_order);
    hits.truncate(k);
    Ok(hits)
}
