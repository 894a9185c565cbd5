//! Exact similarity search over precomputed image embeddings.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub id: String,
    #[serde(rename = "vec")]
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(id: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!("vector {id} is empty")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "vector {id} has non-finite entries"
            )));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm { id });
        }
        Ok(Self { id, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }

    fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }
}

fn check_dims(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: {} has {}, {} has {}",
            u.id,
            u.dim(),
            v.id,
            v.dim()
        )));
    }
    Ok(())
}

/// `dot(u, v) / (|u| |v|)`, accumulated in `f64`.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    check_dims(u, v)?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 {
        return Err(Error::ZeroNorm { id: u.id.clone() });
    }
    if nv == 0.0 {
        return Err(Error::ZeroNorm { id: v.id.clone() });
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Ranking score; larger means more similar for every variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    /// Negated Euclidean distance.
    Euclidean,
    InnerProduct,
}

impl Similarity {
    pub fn score(self, u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
        match self {
            Similarity::Cosine => cosine_similarity(u, v),
            Similarity::Euclidean => {
                check_dims(u, v)?;
                let d2: f64 = u
                    .values
                    .iter()
                    .zip(&v.values)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum();
                Ok(-d2.sqrt())
            }
            Similarity::InnerProduct => {
                check_dims(u, v)?;
                Ok(u.dot(v))
            }
        }
    }
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "euclidean" => Ok(Similarity::Euclidean),
            "inner_product" | "dot" => Ok(Similarity::InnerProduct),
            other => Err(Error::InvalidArgument(format!(
                "unknown similarity {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

/// Insertion-ordered collection of equal-dimension vectors with distinct ids.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingIndex {
    vectors: Vec<EmbeddingVector>,
}

impl EmbeddingIndex {
    pub fn new(vectors: Vec<EmbeddingVector>) -> Result<Self> {
        let mut index = Self::default();
        for v in vectors {
            index.push(v)?;
        }
        Ok(index)
    }

    pub fn push(&mut self, v: EmbeddingVector) -> Result<()> {
        if let Some(first) = self.vectors.first() {
            if first.dim() != v.dim() {
                return Err(Error::InconsistentDim {
                    line: self.vectors.len() + 1,
                    found: v.dim(),
                    id: v.id,
                    expected: first.dim(),
                });
            }
        }
        if self.vectors.iter().any(|e| e.id == v.id) {
            return Err(Error::DuplicateId(v.id));
        }
        self.vectors.push(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.vectors.first().map(EmbeddingVector::dim)
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.vectors.iter().find(|v| v.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &EmbeddingVector> {
        self.vectors.iter()
    }

    /// The `min(k, len)` most similar vectors in descending similarity;
    /// equal similarities keep insertion order.
    pub fn top_k(
        &self,
        query: &EmbeddingVector,
        k: usize,
        metric: Similarity,
    ) -> Result<Vec<Neighbor>> {
        if self.vectors.is_empty() {
            return Err(Error::Empty("embedding index"));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let mut scored = self
            .vectors
            .iter()
            .map(|v| Ok((metric.score(v, query)?, v)))
            .collect::<Result<Vec<_>>>()?;
        // Stable sort: ties stay in insertion order.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(similarity, v)| Neighbor {
                id: v.id.clone(),
                similarity,
            })
            .collect())
    }

    /// Same as [`EmbeddingIndex::top_k`] restricted to ids accepted by `keep`.
    pub fn top_k_filtered(
        &self,
        query: &EmbeddingVector,
        k: usize,
        metric: Similarity,
        keep: impl Fn(&str) -> bool,
    ) -> Result<Vec<Neighbor>> {
        let subset = EmbeddingIndex {
            vectors: self
                .vectors
                .iter()
                .filter(|v| keep(&v.id))
                .cloned()
                .collect(),
        };
        subset.top_k(query, k, metric)
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: String,
    vec: Vec<f32>,
}

/// Reads one `{"id": ..., "vec": [...]}` record per line; blank lines are skipped.
pub fn read_embeddings(reader: impl BufRead) -> Result<EmbeddingIndex> {
    let mut index = EmbeddingIndex::default();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let v = EmbeddingVector::new(rec.id, rec.vec).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(dim) = index.dim() {
            if dim != v.dim() {
                return Err(Error::InconsistentDim {
                    line: line_no,
                    found: v.dim(),
                    id: v.id,
                    expected: dim,
                });
            }
        }
        if !seen.insert(v.id.clone()) {
            return Err(Error::DuplicateId(v.id));
        }
        index.vectors.push(v);
    }
    Ok(index)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingIndex> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(id: &str, v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(id, v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let u = ev("u", &[1.0, 1.0]);
        let x = ev("x", &[1.0, 0.0]);
        let y = ev("y", &[0.0, 1.0]);
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        assert!(
            (cosine_similarity(&u, &x).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12
        );
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            EmbeddingVector::new("z", vec![0.0, 0.0]),
            Err(Error::ZeroNorm { .. })
        ));
        let a = ev("a", &[1.0, 0.0]);
        let b = ev("b", &[1.0, 0.0, 0.0]);
        assert!(cosine_similarity(&a, &b).is_err());
    }

    #[test]
    fn top_k_basics() {
        let idx = EmbeddingIndex::new(vec![
            ev("a", &[1.0, 0.0]),
            ev("b", &[0.0, 1.0]),
            ev("c", &[1.0, 1.0]),
            ev("d", &[2.0, 0.0]),
        ])
        .unwrap();
        let hit = idx
            .top_k(&ev("q", &[0.0, 3.0]), 1, Similarity::Cosine)
            .unwrap();
        assert_eq!(hit[0].id, "b");
        assert!((hit[0].similarity - 1.0).abs() < 1e-12);

        let all = idx
            .top_k(&ev("q", &[1.0, 0.0]), 10, Similarity::Cosine)
            .unwrap();
        let ids: Vec<_> = all.iter().map(|n| n.id.as_str()).collect();
        // a and d tie at 1.0 and keep insertion order
        assert_eq!(ids, ["a", "d", "c", "b"]);

        let euclid = idx
            .top_k(&ev("q", &[2.0, 0.1]), 1, Similarity::Euclidean)
            .unwrap();
        assert_eq!(euclid[0].id, "d");

        assert!(EmbeddingIndex::default()
            .top_k(&ev("q", &[1.0]), 1, Similarity::Cosine)
            .is_err());
        assert!(idx
            .top_k(&ev("q", &[1.0, 0.0]), 0, Similarity::Cosine)
            .is_err());
    }

    #[test]
    fn jsonl_parsing() {
        let ok = "{\"id\":\"a\",\"vec\":[1,2,3,4]}\n\n{\"id\":\"b\",\"vec\":[0,0,1,0]}\n";
        assert_eq!(read_embeddings(ok.as_bytes()).unwrap().len(), 2);

        let dims = "{\"id\":\"a\",\"vec\":[1,2,3,4]}\n{\"id\":\"b\",\"vec\":[1,2,3,4,5]}\n";
        assert!(matches!(
            read_embeddings(dims.as_bytes()),
            Err(Error::InconsistentDim { line: 2, ref id, expected: 4, found: 5 }) if id == "b"
        ));

        let dup = "{\"id\":\"a\",\"vec\":[1]}\n{\"id\":\"a\",\"vec\":[2]}\n";
        assert!(
            matches!(read_embeddings(dup.as_bytes()), Err(Error::DuplicateId(id)) if id == "a")
        );

        let bad = "{\"id\":\"a\",\"vec\":[1]}\nnot json\n";
        assert!(matches!(
            read_embeddings(bad.as_bytes()),
            Err(Error::MalformedLine { line: 2, .. })
        ));
    }
}
