//! Evaluation summaries and plot-ready report files.
//!
//! CSV columns, in order: `id, predicted, true, lower, upper, covered, width`.
//! Interval columns are empty for rows without an interval. The JSON form
//! carries the same rows plus the summary.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conformal::empirical_quantile;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CSV_COLUMNS: [&str; 7] = [
    "id",
    "predicted",
    "true",
    "lower",
    "upper",
    "covered",
    "width",
];

/// Sample Pearson correlation.
pub fn pearson<T: Scalar>(xs: &[T], ys: &[T]) -> Result<T> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "correlation needs at least 2 points".into(),
        ));
    }
    let n = T::from_count(xs.len());
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if !(sxx > T::zero()) || !(syy > T::zero()) {
        return Err(Error::InvalidArgument(
            "correlation undefined for zero variance".into(),
        ));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(crate::scalar::clamp(r, -T::one(), T::one()))
}

/// Mean absolute error.
pub fn mae<T: Scalar>(xs: &[T], ys: &[T]) -> Result<T> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "mae needs equal nonempty inputs, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    Ok(xs.iter().zip(ys).map(|(&x, &y)| (x - y).abs()).sum::<T>() / T::from_count(xs.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthStats<T> {
    pub median: T,
    pub q25: T,
    pub q75: T,
}

/// Nearest-rank quartiles of interval widths.
pub fn width_stats<T: Scalar>(widths: &[T]) -> Result<WidthStats<T>> {
    Ok(WidthStats {
        median: empirical_quantile(widths, 0.5)?,
        q25: empirical_quantile(widths, 0.25)?,
        q75: empirical_quantile(widths, 0.75)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ReportRow<T> {
    pub id: String,
    pub predicted: T,
    #[serde(rename = "true")]
    pub true_score: T,
    #[serde(default)]
    pub lower: Option<T>,
    #[serde(default)]
    pub upper: Option<T>,
}

impl<T: Scalar> ReportRow<T> {
    pub fn covered(&self) -> Option<bool> {
        Some(self.lower? <= self.true_score && self.true_score <= self.upper?)
    }

    pub fn width(&self) -> Option<T> {
        Some(self.upper? - self.lower?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ReportSummary<T> {
    pub n: usize,
    /// Absent when either column has zero variance or fewer than 2 rows.
    pub correlation: Option<T>,
    pub mae: T,
    pub coverage: Option<T>,
    pub width: Option<WidthStats<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EvaluationReport<T> {
    pub pairs: Vec<ReportRow<T>>,
    pub summary: ReportSummary<T>,
}

impl<T: Scalar> EvaluationReport<T> {
    pub fn from_pairs(pairs: Vec<ReportRow<T>>) -> Result<Self> {
        let summary = summarize(&pairs)?;
        Ok(Self { pairs, summary })
    }
}

pub fn summarize<T: Scalar>(pairs: &[ReportRow<T>]) -> Result<ReportSummary<T>> {
    if pairs.is_empty() {
        return Err(Error::Empty("report rows"));
    }
    let predicted: Vec<T> = pairs.iter().map(|p| p.predicted).collect();
    let truth: Vec<T> = pairs.iter().map(|p| p.true_score).collect();
    let with_interval: Vec<&ReportRow<T>> = pairs.iter().filter(|p| p.width().is_some()).collect();
    let (coverage, width) = if with_interval.is_empty() {
        (None, None)
    } else {
        let covered = with_interval
            .iter()
            .filter(|p| p.covered() == Some(true))
            .count();
        let widths: Vec<T> = with_interval.iter().filter_map(|p| p.width()).collect();
        (
            Some(T::from_count(covered) / T::from_count(with_interval.len())),
            Some(width_stats(&widths)?),
        )
    };
    Ok(ReportSummary {
        n: pairs.len(),
        correlation: pearson(&predicted, &truth).ok(),
        mae: mae(&predicted, &truth)?,
        coverage,
        width,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn to_json<T: Scalar>(report: &EvaluationReport<T>) -> Result<String> {
    if report.pairs.is_empty() {
        return Err(Error::Empty("report rows"));
    }
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn from_json<T: Scalar>(text: &str) -> Result<EvaluationReport<T>> {
    Ok(serde_json::from_str(text)?)
}

pub fn to_csv<T: Scalar>(report: &EvaluationReport<T>) -> Result<Vec<u8>> {
    if report.pairs.is_empty() {
        return Err(Error::Empty("report rows"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    let opt = |v: Option<T>| v.map(|v| v.to_string()).unwrap_or_default();
    for p in &report.pairs {
        w.write_record([
            p.id.clone(),
            p.predicted.to_string(),
            p.true_score.to_string(),
            opt(p.lower),
            opt(p.upper),
            p.covered().map(|c| c.to_string()).unwrap_or_default(),
            opt(p.width()),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn emit<T: Scalar>(
    report: &EvaluationReport<T>,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => to_json(report)?.into_bytes(),
        ReportFormat::Csv => to_csv(report)?,
    };
    write_atomic(path, &bytes)
}
