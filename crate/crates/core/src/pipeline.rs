//! Dataset-level runs: reference selection, per-case RCA, calibration and
//! evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conformal::{
    calibrate_with_scores, predict_interval, CalibrationRecord, ConformalCalibration,
    ConformalParams, PredictionInterval, QuantilePair,
};
use crate::dataset::{Case, Dataset, Splits};
use crate::error::{Error, Result};
use crate::metrics::EvaluationMetric;
use crate::rca::{
    rca_point_estimate, rca_scores, PointEstimate, RcaRequest, ReferenceDatabase, ReferenceRecord,
    ScoreSet,
};
use crate::report::{EvaluationReport, ReportRow};
use crate::retrieval::{EmbeddingIndex, Similarity};
use crate::scalar::Scalar;
use crate::segmenter::{
    AtlasConfig, AtlasSegmenter, ExternalManifest, ExternalSegmenter, ReverseSegmenter,
};
use crate::synthval::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    /// Seeded random subset, drawn independently per case.
    Random,
    /// Most similar references by embedding.
    #[default]
    Cosine,
}

impl std::str::FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown retrieval mode {other}"
            ))),
        }
    }
}

/// Externally produced reverse segmentations.
///
/// A flat manifest (`{"ref_id": "path"}`) serves a single assessed case. A
/// nested manifest (`{"case_id": {"ref_id": "path"}}`) serves many.
#[derive(Debug, Clone, PartialEq)]
pub enum ExternalSource {
    Flat(ExternalManifest),
    PerCase(BTreeMap<String, ExternalManifest>),
}

impl ExternalSource {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let obj = value.as_object().ok_or_else(|| {
            Error::InvalidArgument("external manifest must be a JSON object".into())
        })?;
        if obj.values().all(|v| v.is_string()) {
            return Ok(Self::Flat(ExternalManifest::from_json(&text, base)?));
        }
        let mut cases = BTreeMap::new();
        for (case, inner) in obj {
            cases.insert(
                case.clone(),
                ExternalManifest::from_json(&inner.to_string(), base)?,
            );
        }
        Ok(Self::PerCase(cases))
    }

    fn for_case(&self, case_id: &str) -> Result<ExternalManifest> {
        match self {
            Self::Flat(m) => Ok(m.clone()),
            Self::PerCase(map) => map
                .get(case_id)
                .cloned()
                .ok_or_else(|| Error::MissingId(case_id.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmenterChoice {
    Atlas(AtlasConfig),
    External(ExternalSource),
}

impl SegmenterChoice {
    /// Parses `atlas` or `external:<manifest-path>`.
    pub fn parse(choice: &str, atlas: AtlasConfig) -> Result<Self> {
        if choice == "atlas" {
            return Ok(Self::Atlas(atlas));
        }
        if let Some(path) = choice.strip_prefix("external:") {
            return Ok(Self::External(ExternalSource::load(path)?));
        }
        Err(Error::InvalidArgument(format!(
            "segmenter must be `atlas` or `external:<path>`, got {choice}"
        )))
    }

    pub fn for_case<T: Scalar>(&self, case_id: &str) -> Result<Box<dyn ReverseSegmenter<T>>> {
        Ok(match self {
            Self::Atlas(cfg) => Box::new(AtlasSegmenter::new(*cfg)),
            Self::External(src) => Box::new(ExternalSegmenter {
                manifest: src.for_case(case_id)?,
            }),
        })
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub metric: EvaluationMetric,
    pub segmenter: SegmenterChoice,
    pub retrieval: RetrievalMode,
    pub similarity: Similarity,
    /// Reference set size per case; `None` uses every reference.
    pub k_ref: Option<usize>,
    pub conformal: ConformalParams,
    pub mode: PointEstimate,
    pub seed: u64,
    pub resize: Option<(usize, usize)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            metric: EvaluationMetric::Dsc,
            segmenter: SegmenterChoice::Atlas(AtlasConfig::default()),
            retrieval: RetrievalMode::Cosine,
            similarity: Similarity::Cosine,
            k_ref: None,
            conformal: ConformalParams::default(),
            mode: PointEstimate::Max,
            seed: 0,
            resize: Some((256, 256)),
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// References used for one case, in ranking order (cosine) or draw order (random).
pub fn select_references<'a, T: Scalar>(
    db: &'a ReferenceDatabase<T>,
    case: &Case<T>,
    cfg: &PipelineConfig,
) -> Result<Vec<&'a ReferenceRecord<T>>> {
    let m = db.len();
    let k = cfg.k_ref.unwrap_or(m).min(m);
    if k == 0 {
        return Err(Error::InvalidArgument("k_ref must be at least 1".into()));
    }
    match cfg.retrieval {
        RetrievalMode::Random => {
            let mut idx: Vec<usize> = (0..m).collect();
            SeededRng::new(cfg.seed ^ fnv1a(&case.id)).shuffle(&mut idx);
            Ok(idx[..k].iter().map(|&i| &db.records()[i]).collect())
        }
        RetrievalMode::Cosine => {
            if k == m {
                return Ok(db.records().iter().collect());
            }
            let query = case.embedding.as_ref().ok_or_else(|| {
                Error::Dataset(format!(
                    "no embedding for case {} (needed for cosine retrieval)",
                    case.id
                ))
            })?;
            let index = EmbeddingIndex::new(
                db.records()
                    .iter()
                    .map(|r| {
                        r.embedding.clone().ok_or_else(|| {
                            Error::Dataset(format!("no embedding for reference {}", r.id))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )?;
            index
                .top_k(query, k, cfg.similarity)?
                .into_iter()
                .map(|n| db.get(&n.id).ok_or(Error::MissingId(n.id)))
                .collect()
        }
    }
}

/// RCA score set for `case` using its predicted mask as pseudo ground truth.
pub fn case_scores<T: Scalar>(
    case: &Case<T>,
    db: &ReferenceDatabase<T>,
    cfg: &PipelineConfig,
) -> Result<ScoreSet<T>> {
    let prediction = case
        .prediction
        .as_ref()
        .ok_or_else(|| Error::Dataset(format!("case {} has no predicted mask", case.id)))?;
    let refs: Vec<ReferenceRecord<T>> = select_references(db, case, cfg)?
        .into_iter()
        .cloned()
        .collect();
    let segmenter = cfg.segmenter.for_case::<T>(&case.id)?;
    rca_scores(&RcaRequest {
        target: &case.image,
        prediction,
        segmenter: segmenter.as_ref(),
        references: &refs,
        metric: cfg.metric,
    })
}

/// True agreement between a case's prediction and its ground truth.
pub fn true_score<T: Scalar>(case: &Case<T>, metric: EvaluationMetric) -> Result<T> {
    let (Some(pred), Some(gt)) = (&case.prediction, &case.gt) else {
        return Err(Error::Dataset(format!(
            "case {} needs both predicted and ground-truth masks",
            case.id
        )));
    };
    metric.evaluate(pred, gt)
}

#[derive(Debug, Clone)]
pub struct CalibrationRun<T> {
    pub calibration: ConformalCalibration<T>,
    pub records: Vec<CalibrationRecord<T>>,
    pub nonconformity: Vec<T>,
}

/// Calibrates on already-loaded cases.
pub fn calibrate_cases<T: Scalar>(
    cases: &[Case<T>],
    db: &ReferenceDatabase<T>,
    cfg: &PipelineConfig,
) -> Result<CalibrationRun<T>> {
    if cases.is_empty() {
        return Err(Error::Empty("calibration split"));
    }
    let records = cases
        .iter()
        .map(|c| {
            Ok(CalibrationRecord::new(
                c.id.clone(),
                case_scores(c, db, cfg)?,
                true_score(c, cfg.metric)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ConformalParams {
        mode: cfg.mode,
        ..cfg.conformal
    };
    let (calibration, nonconformity) = calibrate_with_scores(&records, &params)?;
    Ok(CalibrationRun {
        calibration,
        records,
        nonconformity,
    })
}

/// Dataset fingerprint: manifest hash, split ids and resize target.
pub fn dataset_fingerprint(ds: &Dataset, splits: &Splits, cfg: &PipelineConfig) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(ds.manifest_hash().as_bytes());
    for ids in [&splits.reference, &splits.calibration] {
        for id in ids {
            h.update(id.as_bytes());
            h.update([0]);
        }
        h.update([1]);
    }
    h.update(format!("{:?}", cfg.resize).as_bytes());
    crate::dataset::hex(&h.finalize())
}

pub fn load_cases<T: Scalar>(
    ds: &Dataset,
    ids: &[String],
    resize: Option<(usize, usize)>,
) -> Result<Vec<Case<T>>> {
    ids.iter().map(|id| ds.load_case(id, resize)).collect()
}

/// Calibrates on the dataset's calibration split.
pub fn calibrate_dataset<T: Scalar>(
    ds: &Dataset,
    splits: &Splits,
    cfg: &PipelineConfig,
) -> Result<CalibrationRun<T>> {
    let db = ds.reference_database::<T>(&splits.reference, cfg.resize)?;
    let cases = load_cases::<T>(ds, &splits.calibration, cfg.resize)?;
    let mut run = calibrate_cases(&cases, &db, cfg)?;
    run.calibration.created_from = Some(dataset_fingerprint(ds, splits, cfg));
    Ok(run)
}

/// Everything reported for one assessed case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseAssessment<T> {
    pub id: String,
    pub scores: ScoreSet<T>,
    pub estimate: T,
    pub mode: PointEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantiles: Option<QuantilePair<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<PredictionInterval<T>>,
}

pub fn assess_case<T: Scalar>(
    case: &Case<T>,
    db: &ReferenceDatabase<T>,
    cfg: &PipelineConfig,
    calib: Option<&ConformalCalibration<T>>,
) -> Result<CaseAssessment<T>> {
    let scores = case_scores(case, db, cfg)?;
    let estimate = rca_point_estimate(&scores, cfg.mode);
    let (quantiles, interval) = match calib {
        Some(c) => (
            Some(QuantilePair::from_scores(&scores, c.p_low, c.p_high)?),
            Some(predict_interval(&scores, c)?),
        ),
        None => (None, None),
    };
    Ok(CaseAssessment {
        id: case.id.clone(),
        scores,
        estimate,
        mode: cfg.mode,
        quantiles,
        interval,
    })
}

/// Point estimates and intervals against ground truth for `cases`.
pub fn evaluate_cases<T: Scalar>(
    cases: &[Case<T>],
    db: &ReferenceDatabase<T>,
    cfg: &PipelineConfig,
    calib: Option<&ConformalCalibration<T>>,
) -> Result<EvaluationReport<T>> {
    let rows = cases
        .iter()
        .map(|c| {
            let a = assess_case(c, db, cfg, calib)?;
            Ok(ReportRow {
                id: c.id.clone(),
                predicted: a.estimate,
                true_score: true_score(c, cfg.metric)?,
                lower: a.interval.map(|i| i.lower),
                upper: a.interval.map(|i| i.upper),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvaluationReport::from_pairs(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GrayImage, LabelMask};
    use crate::retrieval::EmbeddingVector;

    fn case(id: &str, emb: &[f32]) -> Case<f64> {
        Case {
            id: id.into(),
            image: GrayImage::constant(4, 4, 0.5).unwrap(),
            gt: Some(LabelMask::background(4, 4, 2).unwrap()),
            prediction: Some(LabelMask::background(4, 4, 2).unwrap()),
            embedding: Some(EmbeddingVector::new(id, emb.to_vec()).unwrap()),
        }
    }

    fn db() -> ReferenceDatabase<f64> {
        let recs = [("a", [1.0, 0.0]), ("b", [0.0, 1.0]), ("c", [1.0, 1.0])]
            .iter()
            .map(|(id, e)| {
                let c = case(id, e);
                ReferenceRecord::new(*id, c.image, c.gt.unwrap())
                    .unwrap()
                    .with_embedding(c.embedding.unwrap())
            })
            .collect();
        ReferenceDatabase::new(recs).unwrap()
    }

    #[test]
    fn cosine_selection() {
        let cfg = PipelineConfig {
            k_ref: Some(2),
            ..Default::default()
        };
        let picked: Vec<_> = select_references(&db(), &case("q", &[0.9, 0.1]), &cfg)
            .unwrap()
            .iter()
            .map(|r| r.id.clone())
            .collect();
        assert_eq!(picked, ["a", "c"]);
        let all = PipelineConfig {
            k_ref: Some(10),
            ..Default::default()
        };
        assert_eq!(
            select_references(&db(), &case("q", &[0.9, 0.1]), &all)
                .unwrap()
                .len(),
            3
        );
    }

    #[test]
    fn random_selection_is_seeded() {
        let cfg = PipelineConfig {
            k_ref: Some(2),
            retrieval: RetrievalMode::Random,
            seed: 5,
            ..Default::default()
        };
        let d = db();
        let q = case("q", &[1.0, 0.0]);
        let a: Vec<_> = select_references(&d, &q, &cfg)
            .unwrap()
            .iter()
            .map(|r| r.id.clone())
            .collect();
        let b: Vec<_> = select_references(&d, &q, &cfg)
            .unwrap()
            .iter()
            .map(|r| r.id.clone())
            .collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn segmenter_choice_parsing() {
        assert!(matches!(
            SegmenterChoice::parse("atlas", AtlasConfig::default()),
            Ok(SegmenterChoice::Atlas(_))
        ));
        assert!(SegmenterChoice::parse("unet", AtlasConfig::default()).is_err());

        let dir = tempfile::tempdir().unwrap();
        let flat = dir.path().join("flat.json");
        std::fs::write(&flat, r#"{"a": "a.png"}"#).unwrap();
        let nested = dir.path().join("nested.json");
        std::fs::write(&nested, r#"{"case1": {"a": "x/a.png"}}"#).unwrap();
        match ExternalSource::load(&flat).unwrap() {
            ExternalSource::Flat(m) => assert_eq!(m.masks["a"], dir.path().join("a.png")),
            other => panic!("{other:?}"),
        }
        let src = ExternalSource::load(&nested).unwrap();
        assert_eq!(
            src.for_case("case1").unwrap().masks["a"],
            dir.path().join("x/a.png")
        );
        assert!(src.for_case("case2").is_err());
    }
}
