//! Exact cosine-similarity retrieval over embedded knowledge.
//!
//! The index is a flat list of vectors scanned exhaustively; the knowledge
//! base is small enough (tens of thousands of entries at most) that an exact
//! scan is cheap and keeps results reproducible.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Embedder};
use crate::kb::{IconRecord, KnowledgeRecord};
use crate::orchestrator::DesignInput;

pub const DEFAULT_K: usize = 2;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding has non-finite entry at position {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("embedding `{id}` failed: {source}")]
    Embed {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite(i));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = RetrievalError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        EmbeddingVector::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k: DEFAULT_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub record_id: String,
    pub score: f64,
}

/// Hits in non-increasing score order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

/// Immutable flat index of `(id, vector)` entries.
#[derive(Debug, Clone)]
pub struct Index {
    dim: usize,
    entries: Vec<(String, EmbeddingVector)>,
    norms: Vec<f64>,
}

impl Index {
    pub fn from_vectors(
        dim: usize,
        entries: Vec<(String, EmbeddingVector)>,
    ) -> Result<Index, RetrievalError> {
        let mut seen = HashSet::new();
        for (id, v) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
            if v.dim() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
        }
        let norms = entries.iter().map(|(_, v)| v.norm()).collect();
        Ok(Index {
            dim,
            entries,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(String, EmbeddingVector)] {
        &self.entries
    }

    pub fn top_k(
        &self,
        query: &EmbeddingVector,
        config: RetrievalConfig,
    ) -> Result<RetrievalResult, RetrievalError> {
        top_k(self, query, config)
    }
}

pub fn build_index<'a>(
    texts: impl IntoIterator<Item = (&'a str, &'a str)>,
    embedder: &dyn Embedder,
) -> Result<Index, RetrievalError> {
    let dim = embedder.dimension();
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (id, text) in texts {
        if !seen.insert(id) {
            return Err(RetrievalError::DuplicateId(id.to_string()));
        }
        let v = embedder
            .embed_text(text)
            .map_err(|source| RetrievalError::Embed {
                id: id.to_string(),
                source,
            })?;
        entries.push((id.to_string(), v));
    }
    Index::from_vectors(dim, entries)
}

/// Index over the canonical text of every knowledge record.
pub fn build_knowledge_index(
    records: &[KnowledgeRecord],
    embedder: &dyn Embedder,
) -> Result<Index, RetrievalError> {
    let texts: Vec<(String, String)> = records
        .iter()
        .map(|r| (r.id.clone(), r.to_text()))
        .collect();
    build_index(
        texts.iter().map(|(id, t)| (id.as_str(), t.as_str())),
        embedder,
    )
}

/// Exhaustive scan; ties are broken by ascending id.
pub fn top_k(
    index: &Index,
    query: &EmbeddingVector,
    config: RetrievalConfig,
) -> Result<RetrievalResult, RetrievalError> {
    if config.k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if query.dim() != index.dim {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dim,
            actual: query.dim(),
        });
    }
    let qn = query.norm();
    if qn == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    // same arithmetic as `cosine_similarity`, with entry norms cached
    let mut scored = index
        .entries
        .iter()
        .zip(&index.norms)
        .map(|((id, v), &n)| {
            if n == 0.0 {
                return Err(RetrievalError::ZeroNorm);
            }
            let dot: f64 = v.0.iter().zip(&query.0).map(|(x, y)| x * y).sum();
            Ok((id.as_str(), (dot / (n * qn)).clamp(-1.0, 1.0)))
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    let order = |a: &(&str, f64), b: &(&str, f64)| -> Ordering {
        b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
    };
    if scored.len() > config.k {
        scored.select_nth_unstable_by(config.k - 1, order);
        scored.truncate(config.k);
    }
    scored.sort_by(order);
    Ok(RetrievalResult {
        hits: scored
            .into_iter()
            .map(|(id, score)| Hit {
                record_id: id.to_string(),
                score,
            })
            .collect(),
    })
}

/// Query text for a design input: the prompt followed by the canonical
/// layout lines, mirroring the layout section of the knowledge text.
pub fn query_text(input: &DesignInput) -> String {
    format!("{}\n{}", input.prompt, input.layout.to_lines())
}

pub fn retrieve_knowledge(
    index: &Index,
    input: &DesignInput,
    embedder: &dyn Embedder,
    config: RetrievalConfig,
) -> Result<RetrievalResult, RetrievalError> {
    let query = embedder
        .embed_text(&query_text(input))
        .map_err(|source| RetrievalError::Embed {
            id: "<query>".into(),
            source,
        })?;
    top_k(index, &query, config)
}

/// Phrase index over an icon base.
#[derive(Debug, Clone)]
pub struct IconIndex {
    icons: Vec<IconRecord>,
    index: Index,
}

impl IconIndex {
    pub fn build(icons: Vec<IconRecord>, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let index = build_index(
            icons.iter().map(|i| (i.id.as_str(), i.phrase.as_str())),
            embedder,
        )?;
        Ok(IconIndex { icons, index })
    }

    pub fn icons(&self) -> &[IconRecord] {
        &self.icons
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn get(&self, id: &str) -> Option<&IconRecord> {
        self.icons.iter().find(|i| i.id == id)
    }
}

/// Top-1 icon for `phrase` by cosine similarity of the embedded phrase.
pub fn retrieve_icon<'a>(
    icons: &'a IconIndex,
    phrase: &str,
    embedder: &dyn Embedder,
) -> Result<(&'a IconRecord, f64), RetrievalError> {
    if icons.index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let query = embedder
        .embed_text(phrase)
        .map_err(|source| RetrievalError::Embed {
            id: phrase.to_string(),
            source,
        })?;
    let result = top_k(&icons.index, &query, RetrievalConfig { k: 1 })?;
    let hit = &result.hits[0];
    let icon = icons
        .get(&hit.record_id)
        .expect("index ids come from the icon list");
    Ok((icon, hit.score))
}
