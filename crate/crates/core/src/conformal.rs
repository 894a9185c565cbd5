//! Split conformal prediction over RCA score sets.
//!
//! Calibration turns each calibration case into one nonconformity score and
//! keeps the `⌈(1-α)(n+1)⌉`-th smallest as the threshold `q̂`. For the
//! default CQR-style score the quantiles come straight from the case's own
//! RCA score set, so no quantile regressor is trained:
//!
//! ```text
//! s_j  = max(q_low_j - y_j, y_j - q_high_j)
//! C(S) = [q_low(S) - q̂, q_high(S) + q̂] ∩ [0, 1]
//! ```
//!
//! Under exchangeability of calibration and test cases the interval covers
//! the true score with probability at least `1 - α`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::metrics::EvaluationMetric;
use crate::rca::{rca_point_estimate, PointEstimate, ScoreSet};
use crate::scalar::{clamp, cmp_scalar, Scalar};

/// Rank slack absorbing floating point error in `p·m` before taking the ceiling.
const RANK_EPS: f64 = 1e-9;

/// 1-based rank `⌈x⌉` with a small tolerance below integers.
fn ceil_rank(x: f64) -> usize {
    (x - RANK_EPS).ceil().max(0.0) as usize
}

fn check_level(name: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "{name} = {p} not in (0, 1]"
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha = {alpha} not in (0, 1)"
        )));
    }
    Ok(())
}

/// Higher nearest-rank quantile: the `⌈p·m⌉`-th smallest of `m` values.
pub fn empirical_quantile<T: Scalar>(values: &[T], p: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Empty("quantile input"));
    }
    check_level("quantile level", p)?;
    let rank = ceil_rank(p * values.len() as f64).clamp(1, values.len());
    let mut buf = values.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(rank - 1, cmp_scalar);
    Ok(*v)
}

/// Conformal threshold: the `⌈(1-α)(n+1)⌉`-th smallest score, or `+∞` when
/// that rank exceeds `n`.
pub fn conformal_threshold<T: Scalar>(scores: &[T], alpha: f64) -> Result<T> {
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    check_alpha(alpha)?;
    let n = scores.len();
    let rank = threshold_rank(n, alpha);
    if rank > n {
        return Ok(T::infinity());
    }
    let mut buf = scores.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(rank.max(1) - 1, cmp_scalar);
    Ok(*v)
}

/// `⌈(1-α)(n+1)⌉`.
pub fn threshold_rank(n: usize, alpha: f64) -> usize {
    ceil_rank((1.0 - alpha) * (n as f64 + 1.0))
}

/// Smallest calibration size for which the threshold is finite.
pub fn min_calibration_size(alpha: f64) -> usize {
    (1..)
        .find(|&n| threshold_rank(n, alpha) <= n)
        .expect("alpha > 0")
}

pub fn nonconformity_residual<T: Scalar>(predicted: T, truth: T) -> T {
    (truth - predicted).abs()
}

pub fn nonconformity_locally_weighted<T: Scalar>(predicted: T, sigma: T, truth: T) -> Result<T> {
    if !(sigma > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "sigma = {sigma} must be positive"
        )));
    }
    Ok((truth - predicted).abs() / sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair<T> {
    pub q_low: T,
    pub q_high: T,
}

impl<T: Scalar> QuantilePair<T> {
    pub fn from_scores(scores: &ScoreSet<T>, p_low: f64, p_high: f64) -> Result<Self> {
        let values = scores.scores();
        Ok(Self {
            q_low: empirical_quantile(&values, p_low)?,
            q_high: empirical_quantile(&values, p_high)?,
        })
    }
}

/// Signed distance from `truth` to the nearest quantile; negative inside.
pub fn nonconformity_cqr<T: Scalar>(q: &QuantilePair<T>, truth: T) -> T {
    (q.q_low - truth).max(truth - q.q_high)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonconformityKind {
    #[default]
    CqrEmpirical,
    Residual,
    LocallyWeighted,
}

impl std::str::FromStr for NonconformityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cqr" | "cqr_empirical" => Ok(Self::CqrEmpirical),
            "residual" => Ok(Self::Residual),
            "locally_weighted" | "lw" => Ok(Self::LocallyWeighted),
            other => Err(Error::InvalidArgument(format!(
                "unknown nonconformity kind {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord<T> {
    pub id: String,
    pub score_set: ScoreSet<T>,
    pub true_score: T,
    /// Spread estimate for the locally weighted score; the score set's
    /// standard deviation is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<T>,
}

impl<T: Scalar> CalibrationRecord<T> {
    pub fn new(id: impl Into<String>, score_set: ScoreSet<T>, true_score: T) -> Self {
        Self {
            id: id.into(),
            score_set,
            true_score,
            sigma: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalParams {
    pub alpha: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub kind: NonconformityKind,
    /// Point estimate used by the residual kinds.
    pub mode: PointEstimate,
}

impl Default for ConformalParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            p_low: 0.4,
            p_high: 0.95,
            kind: NonconformityKind::CqrEmpirical,
            mode: PointEstimate::Max,
        }
    }
}

impl ConformalParams {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_level("p_low", self.p_low)?;
        check_level("p_high", self.p_high)?;
        if self.p_low > self.p_high {
            return Err(Error::InvalidArgument(format!(
                "p_low = {} exceeds p_high = {}",
                self.p_low, self.p_high
            )));
        }
        Ok(())
    }
}

/// Persisted calibration. `q_hat` serializes as the string `"inf"` when infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConformalCalibration<T> {
    pub alpha: f64,
    pub p_low: f64,
    pub p_high: f64,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub q_hat: T,
    pub n: usize,
    pub kind: NonconformityKind,
    #[serde(default)]
    pub mode: PointEstimate,
    #[serde(default)]
    pub metric: EvaluationMetric,
    #[serde(default)]
    pub created_from: Option<String>,
}

impl<T: Scalar> ConformalCalibration<T> {
    pub fn params(&self) -> ConformalParams {
        ConformalParams {
            alpha: self.alpha,
            p_low: self.p_low,
            p_high: self.p_high,
            kind: self.kind,
            mode: self.mode,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q_hat.is_finite()
    }
}

fn ser_threshold<T: Scalar, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > T::zero() {
        s.serialize_str("inf")
    } else {
        v.serialize(s)
    }
}

fn de_threshold<'de, T: Scalar, D: Deserializer<'de>>(d: D) -> std::result::Result<T, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr<T> {
        Num(T),
        Str(String),
    }
    match Repr::<T>::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) if s == "inf" || s == "+inf" => Ok(T::infinity()),
        Repr::Str(s) => Err(serde::de::Error::custom(format!("invalid threshold {s}"))),
    }
}

fn record_sigma<T: Scalar>(score_set: &ScoreSet<T>, sigma: Option<T>) -> T {
    sigma.unwrap_or_else(|| score_set.std_dev())
}

/// Nonconformity score of one calibration record under `params`.
pub fn record_score<T: Scalar>(rec: &CalibrationRecord<T>, params: &ConformalParams) -> Result<T> {
    match params.kind {
        NonconformityKind::CqrEmpirical => {
            let q = QuantilePair::from_scores(&rec.score_set, params.p_low, params.p_high)?;
            Ok(nonconformity_cqr(&q, rec.true_score))
        }
        NonconformityKind::Residual => Ok(nonconformity_residual(
            rca_point_estimate(&rec.score_set, params.mode),
            rec.true_score,
        )),
        NonconformityKind::LocallyWeighted => nonconformity_locally_weighted(
            rca_point_estimate(&rec.score_set, params.mode),
            record_sigma(&rec.score_set, rec.sigma),
            rec.true_score,
        )
        .map_err(|e| Error::InvalidArgument(format!("record {}: {e}", rec.id))),
    }
}

/// Calibrates on `records` and returns the threshold together with the
/// per-record nonconformity scores (in record order).
pub fn calibrate_with_scores<T: Scalar>(
    records: &[CalibrationRecord<T>],
    params: &ConformalParams,
) -> Result<(ConformalCalibration<T>, Vec<T>)> {
    if records.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    params.validate()?;
    let metric = records[0].score_set.metric;
    if let Some(r) = records.iter().find(|r| r.score_set.metric != metric) {
        return Err(Error::InvalidArgument(format!(
            "record {} uses metric {} but calibration uses {}",
            r.id,
            r.score_set.metric.name(),
            metric.name()
        )));
    }
    let scores = records
        .iter()
        .map(|r| record_score(r, params))
        .collect::<Result<Vec<_>>>()?;
    let q_hat = conformal_threshold(&scores, params.alpha)?;
    Ok((
        ConformalCalibration {
            alpha: params.alpha,
            p_low: params.p_low,
            p_high: params.p_high,
            q_hat,
            n: records.len(),
            kind: params.kind,
            mode: params.mode,
            metric,
            created_from: None,
        },
        scores,
    ))
}

pub fn calibrate<T: Scalar>(
    records: &[CalibrationRecord<T>],
    params: &ConformalParams,
) -> Result<ConformalCalibration<T>> {
    calibrate_with_scores(records, params).map(|(c, _)| c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval<T> {
    pub lower: T,
    pub upper: T,
    /// Bounds before clipping; infinite when `q̂` is.
    pub raw_lower: T,
    pub raw_upper: T,
    /// Set when the raw interval was empty and collapsed to its midpoint.
    pub degenerate: bool,
}

impl<T: Scalar> PredictionInterval<T> {
    /// Clips `[raw_lower, raw_upper]` to `[lo, hi]`; an empty raw interval
    /// collapses to its (clipped) midpoint.
    pub fn from_raw(raw_lower: T, raw_upper: T, lo: T, hi: T) -> Self {
        if raw_lower > raw_upper {
            let mid = clamp((raw_lower + raw_upper) * T::lit(0.5), lo, hi);
            return Self {
                lower: mid,
                upper: mid,
                raw_lower,
                raw_upper,
                degenerate: true,
            };
        }
        Self {
            lower: clamp(raw_lower, lo, hi),
            upper: clamp(raw_upper, lo, hi),
            raw_lower,
            raw_upper,
            degenerate: false,
        }
    }

    pub fn width(&self) -> T {
        self.upper - self.lower
    }

    pub fn raw_width(&self) -> T {
        self.raw_upper - self.raw_lower
    }

    /// Boundary-inclusive membership; a degenerate interval holds only its point.
    pub fn contains(&self, y: T) -> bool {
        if self.degenerate {
            y == self.lower
        } else {
            self.lower <= y && y <= self.upper
        }
    }
}

fn clip_range<T: Scalar>(metric: EvaluationMetric) -> (T, T) {
    match metric {
        EvaluationMetric::Dsc => (T::zero(), T::one()),
        EvaluationMetric::Hausdorff | EvaluationMetric::Assd => (T::zero(), T::infinity()),
    }
}

/// Conformal interval for a new case from its RCA score set.
pub fn predict_interval<T: Scalar>(
    score_set: &ScoreSet<T>,
    calib: &ConformalCalibration<T>,
) -> Result<PredictionInterval<T>> {
    predict_interval_with_sigma(score_set, calib, None)
}

/// As [`predict_interval`], with an explicit spread for the locally weighted kind.
pub fn predict_interval_with_sigma<T: Scalar>(
    score_set: &ScoreSet<T>,
    calib: &ConformalCalibration<T>,
    sigma: Option<T>,
) -> Result<PredictionInterval<T>> {
    let params = calib.params();
    params.validate()?;
    let (lo, hi) = clip_range::<T>(score_set.metric);
    let q = calib.q_hat;
    let (raw_lower, raw_upper) = match calib.kind {
        NonconformityKind::CqrEmpirical => {
            let pair = QuantilePair::from_scores(score_set, params.p_low, params.p_high)?;
            (pair.q_low - q, pair.q_high + q)
        }
        NonconformityKind::Residual => {
            let y = rca_point_estimate(score_set, params.mode);
            (y - q, y + q)
        }
        NonconformityKind::LocallyWeighted => {
            let y = rca_point_estimate(score_set, params.mode);
            let s = record_sigma(score_set, sigma);
            if !(s > T::zero()) {
                return Err(Error::InvalidArgument(format!(
                    "sigma = {s} must be positive"
                )));
            }
            (y - q * s, y + q * s)
        }
    };
    if q.is_infinite() && q > T::zero() {
        return Ok(PredictionInterval {
            lower: lo,
            upper: hi,
            raw_lower: T::neg_infinity(),
            raw_upper: T::infinity(),
            degenerate: false,
        });
    }
    Ok(PredictionInterval::from_raw(raw_lower, raw_upper, lo, hi))
}

/// Fraction of cases whose truth lies in its interval.
pub fn empirical_coverage<T: Scalar>(
    intervals: &[PredictionInterval<T>],
    truths: &[T],
) -> Result<T> {
    if intervals.is_empty() {
        return Err(Error::Empty("coverage input"));
    }
    if intervals.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} intervals but {} truths",
            intervals.len(),
            truths.len()
        )));
    }
    let covered = intervals
        .iter()
        .zip(truths)
        .filter(|(i, &y)| i.contains(y))
        .count();
    Ok(T::from_count(covered) / T::from_count(intervals.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: &[f64]) -> ScoreSet<f64> {
        ScoreSet::from_scores(EvaluationMetric::Dsc, values).unwrap()
    }

    fn calib(q_hat: f64) -> ConformalCalibration<f64> {
        ConformalCalibration {
            alpha: 0.1,
            p_low: 0.4,
            p_high: 0.95,
            q_hat,
            n: 100,
            kind: NonconformityKind::CqrEmpirical,
            mode: PointEstimate::Max,
            metric: EvaluationMetric::Dsc,
            created_from: None,
        }
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(empirical_quantile(&v, 0.4).unwrap(), 4.0);
        assert_eq!(empirical_quantile(&v, 0.95).unwrap(), 10.0);
        assert_eq!(empirical_quantile(&v, 1.0).unwrap(), 10.0);
        assert_eq!(empirical_quantile(&v, 1e-9).unwrap(), 1.0);
        for p in [0.01, 0.5, 1.0] {
            assert_eq!(empirical_quantile(&[0.37], p).unwrap(), 0.37);
        }
        assert!(empirical_quantile::<f64>(&[], 0.5).is_err());
        assert!(empirical_quantile(&v, 0.0).is_err());
    }

    #[test]
    fn threshold_examples() {
        let nine: Vec<f64> = (1..=9).rev().map(|i| i as f64 / 10.0).collect();
        assert_eq!(conformal_threshold(&nine, 0.1).unwrap(), 0.9);
        let five = [0.1f64, 0.2, 0.3, 0.4, 0.5];
        assert!(conformal_threshold(&five, 0.1).unwrap().is_infinite());
        assert_eq!(conformal_threshold(&[0.3; 20], 0.2).unwrap(), 0.3);
        assert_eq!(threshold_rank(9, 0.1), 9);
        assert_eq!(threshold_rank(5, 0.1), 6);
        assert_eq!(min_calibration_size(0.1), 9);
        assert!(conformal_threshold::<f64>(&[], 0.1).is_err());
    }

    #[test]
    fn nonconformity_examples() {
        assert_eq!(nonconformity_residual(0.8, 0.8), 0.0);
        assert!((nonconformity_residual::<f64>(0.8, 0.6) - 0.2).abs() < 1e-12);
        assert!((nonconformity_residual::<f64>(0.1, 0.9) - 0.8).abs() < 1e-12);

        assert_eq!(nonconformity_locally_weighted(0.8, 0.1, 0.8).unwrap(), 0.0);
        assert!(
            (nonconformity_locally_weighted::<f64>(0.8, 0.1, 0.6).unwrap() - 2.0).abs() < 1e-12
        );
        assert_eq!(
            nonconformity_locally_weighted(0.5, 0.25, 0.75).unwrap(),
            1.0
        );
        assert!(nonconformity_locally_weighted(0.5, 0.0, 0.75).is_err());

        let q = QuantilePair {
            q_low: 0.6f64,
            q_high: 0.9,
        };
        assert!((nonconformity_cqr(&q, 0.95) - 0.05).abs() < 1e-12);
        assert!((nonconformity_cqr(&q, 0.75) + 0.15).abs() < 1e-12);
        assert!((nonconformity_cqr(&q, 0.5) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn noiseless_calibration_has_zero_threshold() {
        let records: Vec<_> = (0..20)
            .map(|i| {
                let y = i as f64 / 20.0;
                CalibrationRecord::new(format!("c{i}"), set(&[y; 8]), y)
            })
            .collect();
        let c = calibrate(&records, &ConformalParams::default()).unwrap();
        assert_eq!(c.q_hat, 0.0);
        assert_eq!(c.n, 20);
    }

    #[test]
    fn small_calibration_is_vacuous() {
        let records: Vec<_> = (0..5)
            .map(|i| CalibrationRecord::new(format!("c{i}"), set(&[0.5, 0.6]), 0.55))
            .collect();
        let c = calibrate(&records, &ConformalParams::default()).unwrap();
        assert!(c.q_hat.is_infinite());
        let iv = predict_interval(&set(&[0.2, 0.3]), &c).unwrap();
        assert_eq!((iv.lower, iv.upper), (0.0, 1.0));
        assert!(calibrate::<f64>(&[], &ConformalParams::default()).is_err());
    }

    #[test]
    fn interval_examples() {
        // ten scores whose 0.4 / 0.95 quantiles are 0.6 / 0.9
        let s = set(&[0.1, 0.3, 0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.88, 0.9]);
        let iv = predict_interval(&s, &calib(0.05)).unwrap();
        assert!((iv.lower - 0.55).abs() < 1e-12 && (iv.upper - 0.95).abs() < 1e-12);

        let s = set(&[0.1, 0.3, 0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9, 0.98]);
        let iv = predict_interval(&s, &calib(0.05)).unwrap();
        assert!((iv.lower - 0.55).abs() < 1e-12);
        assert_eq!(iv.upper, 1.0);
        assert!((iv.raw_upper - 1.03).abs() < 1e-12);

        let iv = predict_interval(&s, &calib(f64::INFINITY)).unwrap();
        assert_eq!((iv.lower, iv.upper), (0.0, 1.0));
    }

    #[test]
    fn negative_threshold_can_collapse() {
        let s = set(&[0.6, 0.6, 0.6, 0.6, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7]);
        let iv = predict_interval(&s, &calib(-0.2)).unwrap();
        assert!(iv.degenerate);
        assert!((iv.lower - 0.65).abs() < 1e-12);
        assert_eq!(iv.lower, iv.upper);
        assert!(iv.contains(iv.lower));
        assert!(!iv.contains(0.66));
    }

    #[test]
    fn residual_kinds() {
        let s = set(&[0.5, 0.7, 0.9]);
        let mut c = calib(0.1);
        c.kind = NonconformityKind::Residual;
        let iv = predict_interval(&s, &c).unwrap();
        assert!((iv.lower - 0.8).abs() < 1e-12 && (iv.upper - 1.0).abs() < 1e-12);

        c.kind = NonconformityKind::LocallyWeighted;
        let iv = predict_interval_with_sigma(&s, &c, Some(0.5)).unwrap();
        assert!((iv.raw_lower - 0.85).abs() < 1e-12 && (iv.raw_upper - 0.95).abs() < 1e-12);
        // default spread: sample std of {0.5, 0.7, 0.9} = 0.2
        let iv = predict_interval(&s, &c).unwrap();
        assert!((iv.raw_lower - 0.88).abs() < 1e-12);

        let flat = set(&[0.5, 0.5]);
        assert!(predict_interval(&flat, &c).is_err());
    }

    #[test]
    fn coverage_counting() {
        let full = PredictionInterval::from_raw(0.0, 1.0, 0.0, 1.0);
        assert_eq!(
            empirical_coverage(&[full; 3], &[0.0, 0.5, 1.0]).unwrap(),
            1.0
        );
        let iv = PredictionInterval::from_raw(0.2, 0.4, 0.0, 1.0);
        assert_eq!(empirical_coverage(&[iv, iv], &[0.2, 0.4]).unwrap(), 1.0);
        let truths: Vec<f64> = (0..10).map(|i| if i == 3 { 0.9 } else { 0.3 }).collect();
        assert_eq!(empirical_coverage(&[iv; 10], &truths).unwrap(), 0.9);
        assert!(empirical_coverage(&[iv], &[0.1, 0.2]).is_err());
        assert!(empirical_coverage::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn calibration_json_round_trip() {
        for q in [0.125, f64::INFINITY, -0.03] {
            let c = calib(q);
            let text = serde_json::to_string(&c).unwrap();
            let back: ConformalCalibration<f64> = serde_json::from_str(&text).unwrap();
            assert_eq!(back, c);
        }
        assert!(serde_json::to_string(&calib(f64::INFINITY))
            .unwrap()
            .contains("\"q_hat\":\"inf\""));
    }

    #[test]
    fn param_validation() {
        let bad = ConformalParams {
            p_low: 0.9,
            p_high: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ConformalParams {
            alpha: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
