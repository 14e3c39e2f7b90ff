//! Exact cosine top-K over exemplar embeddings, plus a nearest-centroid
//! classifier over the same vectors.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ExemplarSet, LabelSet};
use crate::embedder::{dot, EmbeddingVector};

#[derive(Debug, Error, PartialEq)]
pub enum RetrieveError {
    #[error("index needs at least one exemplar")]
    EmptyIndex,
    #[error("{exemplars} exemplars but {vectors} vectors")]
    LengthMismatch { exemplars: usize, vectors: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k={k} out of range for index of {n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("class {0} has no exemplars")]
    EmptyClass(String),
    #[error("centroid of class {0} is the zero vector")]
    ZeroCentroid(String),
}

/// Position of an exemplar in the set the index was built from.
pub type ExemplarId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub exemplar_id: ExemplarId,
    pub similarity: f64,
    /// 1-based.
    pub rank: usize,
}

/// Immutable flat matrix of unit vectors in insertion order.
#[derive(Debug, Clone)]
pub struct ExemplarIndex {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<ExemplarId>,
}

impl ExemplarIndex {
    /// Indexes `vectors[i]` as exemplar `i` of `exemplars`.
    pub fn build(exemplars: &ExemplarSet, vectors: &[EmbeddingVector]) -> Result<Self, RetrieveError> {
        if exemplars.len() != vectors.len() {
            return Err(RetrieveError::LengthMismatch {
                exemplars: exemplars.len(),
                vectors: vectors.len(),
            });
        }
        Self::from_vectors(vectors)
    }

    pub fn from_vectors(vectors: &[EmbeddingVector]) -> Result<Self, RetrieveError> {
        let dim = vectors.first().ok_or(RetrieveError::EmptyIndex)?.dim();
        let mut data = Vec::with_capacity(dim * vectors.len());
        for v in vectors {
            if v.dim() != dim {
                return Err(RetrieveError::DimensionMismatch { expected: dim, got: v.dim() });
            }
            data.extend_from_slice(v.as_slice());
        }
        Ok(ExemplarIndex {
            dim,
            data,
            ids: (0..vectors.len()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, position: usize) -> &[f32] {
        &self.data[position * self.dim..(position + 1) * self.dim]
    }

    /// The `k` most similar exemplars, similarity descending, ties by
    /// ascending insertion position.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit>, RetrieveError> {
        if query.dim() != self.dim {
            return Err(RetrieveError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        if k == 0 || k > self.len() {
            return Err(RetrieveError::KOutOfRange { k, n: self.len() });
        }
        // Min-heap of the best k seen so far; the root is the weakest keeper.
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for (position, row) in self.data.chunks_exact(self.dim).enumerate() {
            let candidate = Candidate {
                similarity: dot(query.as_slice(), row),
                position,
            };
            if heap.len() < k {
                heap.push(candidate);
            } else if candidate < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(candidate);
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .enumerate()
            .map(|(i, c)| RetrievalHit {
                exemplar_id: self.ids[c.position],
                similarity: c.similarity,
                rank: i + 1,
            })
            .collect())
    }
}

/// Ordered so that "better" candidates compare as smaller: higher similarity
/// first, then lower insertion position.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    similarity: f64,
    position: usize,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .similarity
            .total_cmp(&self.similarity)
            .then(self.position.cmp(&other.position))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

/// Percentage of the pool that `k` represents, at one decimal (`"2.2%"`).
pub fn format_pool_fraction(k: usize, pool: usize) -> String {
    format!("{:.1}%", 100.0 * k as f64 / pool as f64)
}

/// Unit-length mean vector per class.
#[derive(Debug, Clone)]
pub struct CentroidModel {
    label_set: LabelSet,
    centroids: Vec<EmbeddingVector>,
}

impl CentroidModel {
    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn centroids(&self) -> &[EmbeddingVector] {
        &self.centroids
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].dim()
    }

    /// Argmax of cosine similarity; ties go to the lowest label index.
    pub fn predict(&self, query: &EmbeddingVector) -> Result<(usize, f64), RetrieveError> {
        if query.dim() != self.dim() {
            return Err(RetrieveError::DimensionMismatch {
                expected: self.dim(),
                got: query.dim(),
            });
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (class, centroid) in self.centroids.iter().enumerate() {
            let s = centroid.dot(query);
            if s > best.1 {
                best = (class, s);
            }
        }
        Ok(best)
    }
}

pub fn fit_centroids(exemplars: &ExemplarSet, vectors: &[EmbeddingVector]) -> Result<CentroidModel, RetrieveError> {
    if exemplars.len() != vectors.len() {
        return Err(RetrieveError::LengthMismatch {
            exemplars: exemplars.len(),
            vectors: vectors.len(),
        });
    }
    let labels = exemplars.label_set();
    let dim = vectors.first().ok_or_else(|| {
        RetrieveError::EmptyClass(labels.names().first().cloned().unwrap_or_default())
    })?;
    let dim = dim.dim();
    let mut sums = vec![vec![0f64; dim]; labels.len()];
    let mut counts = vec![0usize; labels.len()];
    for (item, v) in exemplars.exemplars().iter().zip(vectors) {
        if v.dim() != dim {
            return Err(RetrieveError::DimensionMismatch { expected: dim, got: v.dim() });
        }
        counts[item.label] += 1;
        for (s, &x) in sums[item.label].iter_mut().zip(v.as_slice()) {
            *s += f64::from(x);
        }
    }
    let mut centroids = Vec::with_capacity(labels.len());
    for (class, sum) in sums.into_iter().enumerate() {
        if counts[class] == 0 {
            return Err(RetrieveError::EmptyClass(labels.name(class).to_string()));
        }
        centroids.push(normalize_f64(&sum).ok_or_else(|| RetrieveError::ZeroCentroid(labels.name(class).to_string()))?);
    }
    Ok(CentroidModel {
        label_set: labels.clone(),
        centroids,
    })
}

/// Normalizes in f64 before narrowing; `None` for (near-)zero input.
pub(crate) fn normalize_f64(values: &[f64]) -> Option<EmbeddingVector> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    EmbeddingVector::new(values.iter().map(|v| (v / norm) as f32).collect()).ok()
}
