//! Reverse classification accuracy.
//!
//! The assessed image and its predicted mask act as a one-shot training pair
//! for a reverse segmenter, which is then applied to every annotated
//! reference. Each reference yields one agreement score; together they form
//! the [`ScoreSet`] that both point estimates and conformal intervals use.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvaluationMetric;
use crate::raster::{GrayImage, LabelMask};
use crate::retrieval::EmbeddingVector;
use crate::scalar::{cmp_scalar, Scalar};
use crate::segmenter::{Query, ReverseSegmenter};

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRecord<T> {
    pub id: String,
    pub image: GrayImage<T>,
    pub gt_mask: LabelMask,
    pub embedding: Option<EmbeddingVector>,
}

impl<T: Scalar> ReferenceRecord<T> {
    pub fn new(id: impl Into<String>, image: GrayImage<T>, gt_mask: LabelMask) -> Result<Self> {
        if image.dims() != gt_mask.dims() {
            return Err(Error::DimensionMismatch {
                expected: image.dims(),
                found: gt_mask.dims(),
            });
        }
        Ok(Self {
            id: id.into(),
            image,
            gt_mask,
            embedding: None,
        })
    }

    pub fn with_embedding(mut self, embedding: EmbeddingVector) -> Self {
        self.embedding = Some(embedding);
        self
    }
}

/// Nonempty reference set with pairwise distinct ids.
#[derive(Debug, Clone)]
pub struct ReferenceDatabase<T> {
    records: Vec<ReferenceRecord<T>>,
}

impl<T: Scalar> ReferenceDatabase<T> {
    pub fn new(records: Vec<ReferenceRecord<T>>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("reference database"));
        }
        let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateId(w[0].to_string()));
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[ReferenceRecord<T>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ReferenceRecord<T>> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Sub-database in the order of `ids`.
    pub fn select(&self, ids: &[&str]) -> Result<Self> {
        let records = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::MissingId(id.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry<T> {
    pub reference_id: String,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet<T> {
    pub metric: EvaluationMetric,
    entries: Vec<ScoreEntry<T>>,
}

impl<T: Scalar> ScoreSet<T> {
    pub fn new(metric: EvaluationMetric, entries: Vec<ScoreEntry<T>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("score set"));
        }
        if let Some(e) = entries.iter().find(|e| e.score.is_nan()) {
            return Err(Error::InvalidArgument(format!(
                "score for {} is NaN",
                e.reference_id
            )));
        }
        if metric == EvaluationMetric::Dsc {
            if let Some(e) = entries
                .iter()
                .find(|e| e.score < T::zero() || e.score > T::one())
            {
                return Err(Error::InvalidArgument(format!(
                    "DSC score {} for {} outside [0, 1]",
                    e.score, e.reference_id
                )));
            }
        }
        Ok(Self { metric, entries })
    }

    /// Score set with generated ids `r0, r1, ...`.
    pub fn from_scores(metric: EvaluationMetric, scores: &[T]) -> Result<Self> {
        Self::new(
            metric,
            scores
                .iter()
                .enumerate()
                .map(|(i, &score)| ScoreEntry {
                    reference_id: format!("r{i}"),
                    score,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[ScoreEntry<T>] {
        &self.entries
    }

    pub fn scores(&self) -> Vec<T> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sample standard deviation (`n - 1` denominator; zero for a singleton).
    pub fn std_dev(&self) -> T {
        let n = self.entries.len();
        if n < 2 {
            return T::zero();
        }
        let mean = rca_point_estimate(self, PointEstimate::Mean);
        let ss: T = self
            .entries
            .iter()
            .map(|e| (e.score - mean) * (e.score - mean))
            .sum();
        (ss / T::from_count(n - 1)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointEstimate {
    #[default]
    Max,
    Mean,
}

impl std::str::FromStr for PointEstimate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(PointEstimate::Max),
            "mean" => Ok(PointEstimate::Mean),
            other => Err(Error::InvalidArgument(format!("unknown mode {other}"))),
        }
    }
}

/// Best (`Max`) or average (`Mean`) reference score.
pub fn rca_point_estimate<T: Scalar>(scores: &ScoreSet<T>, mode: PointEstimate) -> T {
    let values = scores.entries.iter().map(|e| e.score);
    match mode {
        PointEstimate::Max => values.max_by(cmp_scalar).expect("score set is nonempty"),
        PointEstimate::Mean => values.sum::<T>() / T::from_count(scores.len()),
    }
}

pub struct RcaRequest<'a, T: Scalar> {
    pub target: &'a GrayImage<T>,
    pub prediction: &'a LabelMask,
    pub segmenter: &'a dyn ReverseSegmenter<T>,
    pub references: &'a [ReferenceRecord<T>],
    pub metric: EvaluationMetric,
}

/// One score per reference, in reference order. Any failing reference aborts
/// the request.
pub fn rca_scores<T: Scalar>(req: &RcaRequest<'_, T>) -> Result<ScoreSet<T>> {
    if req.target.dims() != req.prediction.dims() {
        return Err(Error::DimensionMismatch {
            expected: req.target.dims(),
            found: req.prediction.dims(),
        });
    }
    if req.references.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let entries = req
        .references
        .par_iter()
        .map(|r| {
            let wrap = |source: Error| Error::Segmenter {
                reference: r.id.clone(),
                source: Box::new(source),
            };
            let seg = req
                .segmenter
                .segment(
                    req.target,
                    req.prediction,
                    Query {
                        id: &r.id,
                        image: &r.image,
                    },
                )
                .map_err(wrap)?;
            let score = req.metric.evaluate::<T>(&seg, &r.gt_mask).map_err(wrap)?;
            Ok(ScoreEntry {
                reference_id: r.id.clone(),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(req.metric, entries)
}
