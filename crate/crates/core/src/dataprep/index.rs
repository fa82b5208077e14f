//! Exhaustive cosine-similarity index over image embeddings.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embed::EmbeddingPlugin;
use crate::error::{RegoError, Result};
use crate::imageio::ImageSample;

pub const DEFAULT_K: usize = 5;
pub const INDEX_VERSION: u32 = 1;

/// Unit-norm embeddings keyed by image id, with precomputed top-`k` neighbor lists.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceIndex {
    embedder_id: String,
    k: usize,
    ids: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    neighbors: Vec<Vec<usize>>,
    positions: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    embedder_id: String,
    k: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    embedding: Vec<f64>,
    neighbors: Vec<String>,
}

fn normalize(id: &str, v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(RegoError::DegenerateEmbedding(id.to_string()));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ReferenceIndex {
    /// Embeds the left half of every sample (the part known at inference time).
    pub fn build(samples: &[ImageSample], embedder: &dyn EmbeddingPlugin, k: usize) -> Result<Self> {
        if samples.len() < 2 {
            return Err(RegoError::Config(format!(
                "an index needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let raw: Vec<Result<Vec<f64>>> = samples
            .par_iter()
            .map(|s| embedder.embed(&s.left_half()?))
            .collect();
        let mut ids = Vec::with_capacity(samples.len());
        let mut embeddings = Vec::with_capacity(samples.len());
        for (s, e) in samples.iter().zip(raw) {
            ids.push(s.id.clone());
            embeddings.push(e?);
        }
        Self::from_embeddings(embedder.id(), ids, embeddings, k)
    }

    pub fn from_embeddings(embedder_id: String, ids: Vec<String>, embeddings: Vec<Vec<f64>>, k: usize) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(RegoError::Shape("ids and embeddings differ in length".into()));
        }
        if ids.len() < 2 {
            return Err(RegoError::Config("an index needs at least 2 entries".into()));
        }
        if k == 0 || k >= ids.len() {
            return Err(RegoError::Config(format!(
                "k = {k} must satisfy 1 <= k < {} (index size)",
                ids.len()
            )));
        }
        let dim = embeddings[0].len();
        let mut unit = Vec::with_capacity(ids.len());
        for (id, e) in ids.iter().zip(embeddings) {
            if e.len() != dim {
                return Err(RegoError::Shape(format!("embedding of `{id}` has length {}, expected {dim}", e.len())));
            }
            unit.push(normalize(id, e)?);
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(RegoError::Config(format!("duplicate id `{id}` in index")));
            }
        }
        let mut index = ReferenceIndex {
            embedder_id,
            k,
            ids,
            embeddings: unit,
            neighbors: Vec::new(),
            positions,
        };
        index.neighbors = (0..index.len())
            .into_par_iter()
            .map(|i| index.rank(&index.embeddings[i], Some(i)).into_iter().take(k).map(|(j, _)| j).collect())
            .collect();
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn embedding(&self, id: &str) -> Result<&[f64]> {
        Ok(&self.embeddings[self.position(id)?])
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.positions
            .get(id)
            .copied()
            .ok_or_else(|| RegoError::NotFound(format!("id `{id}` is not indexed")))
    }

    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        Ok(dot(&self.embeddings[self.position(a)?], &self.embeddings[self.position(b)?]))
    }

    /// Every entry except `exclude`, by descending similarity; ties keep index order.
    fn rank(&self, query: &[f64], exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self
            .embeddings
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != exclude)
            .map(|(j, e)| (j, dot(query, e)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    }

    fn check_k(&self, k: usize, available: usize) -> Result<()> {
        if k == 0 || k > available {
            return Err(RegoError::Config(format!(
                "k = {k} must satisfy 1 <= k < {} (index size)",
                self.len()
            )));
        }
        Ok(())
    }

    /// The `k` most similar other entries, most similar first.
    pub fn query_neighbors(&self, query_id: &str, k: usize) -> Result<Vec<(String, f64)>> {
        let pos = self.position(query_id)?;
        self.check_k(k, self.len() - 1)?;
        Ok(self
            .rank(&self.embeddings[pos], Some(pos))
            .into_iter()
            .take(k)
            .map(|(j, s)| (self.ids[j].clone(), s))
            .collect())
    }

    /// Ranks all entries against an arbitrary (not necessarily normalized) embedding.
    pub fn query_embedding(&self, embedding: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        if embedding.len() != self.embeddings[0].len() {
            return Err(RegoError::Shape(format!(
                "query embedding has length {}, index uses {}",
                embedding.len(),
                self.embeddings[0].len()
            )));
        }
        self.check_k(k, self.len())?;
        let q = normalize("query", embedding.to_vec())?;
        Ok(self
            .rank(&q, None)
            .into_iter()
            .take(k)
            .map(|(j, s)| (self.ids[j].clone(), s))
            .collect())
    }

    /// Precomputed neighbor ids of `id`, most similar first.
    pub fn neighbors(&self, id: &str) -> Result<Vec<&str>> {
        Ok(self.neighbors[self.position(id)?]
            .iter()
            .map(|&j| self.ids[j].as_str())
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = IndexFile {
            version: INDEX_VERSION,
            embedder_id: self.embedder_id.clone(),
            k: self.k,
            entries: self
                .ids
                .iter()
                .enumerate()
                .map(|(i, id)| IndexEntry {
                    id: id.clone(),
                    embedding: self.embeddings[i].clone(),
                    neighbors: self.neighbors[i].iter().map(|&j| self.ids[j].clone()).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: IndexFile = serde_json::from_str(text)?;
        if file.version != INDEX_VERSION {
            return Err(RegoError::Config(format!("unsupported index version {}", file.version)));
        }
        let ids: Vec<String> = file.entries.iter().map(|e| e.id.clone()).collect();
        let embeddings: Vec<Vec<f64>> = file.entries.iter().map(|e| e.embedding.clone()).collect();
        let mut index = Self::from_embeddings(file.embedder_id, ids, embeddings, file.k)?;
        // stored embeddings and neighbor lists are authoritative
        for (i, e) in file.entries.iter().enumerate() {
            let norm = e.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(RegoError::Config(format!("entry `{}` is not unit-norm ({norm})", e.id)));
            }
            index.embeddings[i] = e.embedding.clone();
            if e.neighbors.len() != index.k {
                return Err(RegoError::Config(format!(
                    "entry `{}` lists {} neighbors, k = {}",
                    e.id,
                    e.neighbors.len(),
                    index.k
                )));
            }
            index.neighbors[i] = e
                .neighbors
                .iter()
                .map(|n| index.position(n))
                .collect::<Result<_>>()?;
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| RegoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RegoError::io(path, e))?;
        Self::from_json(&text)
    }
}
