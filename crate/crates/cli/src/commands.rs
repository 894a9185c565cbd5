use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use segqc::conformal::ConformalCalibration;
use segqc::dataset::{Case, Dataset, Splits};
use segqc::pipeline::{assess_case, calibrate_dataset, evaluate_cases, load_cases, PipelineConfig};
use segqc::raster::{load_image, load_mask};
use segqc::report::{emit, write_atomic, ReportFormat};
use segqc::synthval::{run_synthetic_trial, SyntheticConfig, TrialOutcome};

use crate::args::{CaseArgs, IndexArgs, PredictArgs, RunArgs, SynthArgs};
use crate::config::RunConfig;
use crate::UsageError;

fn to_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, to_json(value)?.as_bytes())?;
    Ok(())
}

/// Opens the dataset and draws the seeded split.
fn open(cfg: &RunConfig) -> anyhow::Result<(Dataset, Splits)> {
    let ds = Dataset::open(cfg.dataset()?)?;
    let splits = ds.splits(&cfg.splits, cfg.seed)?;
    Ok((ds, splits))
}

fn record_splits(cfg: &RunConfig, splits: &Splits) -> anyhow::Result<()> {
    if let Some(dir) = &cfg.out_dir {
        write_json(&dir.join("splits.json"), splits)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct IndexSummary {
    count: usize,
    dim: usize,
    /// Manifest items without an embedding.
    missing: Vec<String>,
}

pub fn index(args: &IndexArgs) -> anyhow::Result<()> {
    let ds = Dataset::open(&args.dataset)?;
    let index = ds.embeddings().ok_or_else(|| {
        segqc::Error::Dataset(format!(
            "{} has no {}",
            args.dataset.display(),
            segqc::dataset::EMBEDDINGS_FILE
        ))
    })?;
    let missing = ds
        .manifest()
        .items
        .iter()
        .filter(|i| index.get(&i.id).is_none())
        .map(|i| i.id.clone())
        .collect();
    print!(
        "{}",
        to_json(&IndexSummary {
            count: index.len(),
            dim: index.dim().unwrap_or(0),
            missing,
        })?
    );
    Ok(())
}

/// The assessed case, either a dataset item or a pair of files.
fn target_case(args: &CaseArgs, ds: &Dataset, pipe: &PipelineConfig) -> anyhow::Result<Case<f64>> {
    if let Some(id) = &args.target_id {
        return Ok(ds.load_case(id, pipe.resize)?);
    }
    let (Some(image_path), Some(pred_path)) = (&args.target, &args.pred) else {
        anyhow::bail!(UsageError(
            "give --target-id, or --target with --pred".into()
        ));
    };
    let mut image = load_image::<f64>(image_path)?;
    let mut prediction = load_mask(pred_path, ds.class_count())?;
    if prediction.dims() != image.dims() {
        return Err(segqc::Error::DimensionMismatch {
            expected: image.dims(),
            found: prediction.dims(),
        }
        .into());
    }
    if let Some((w, h)) = pipe.resize {
        image = image.resize_bilinear(w, h)?;
        prediction = prediction.resize_nearest(w, h)?;
    }
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "target".into());
    Ok(Case {
        id,
        image,
        gt: None,
        prediction: Some(prediction),
        embedding: None,
    })
}

fn assess(args: &CaseArgs, calib: Option<&ConformalCalibration<f64>>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::from_run_args(&args.run)?;
    if let Some(c) = calib {
        // The interval is only valid under the calibrated settings.
        cfg.metric = c.metric;
        cfg.mode = c.mode;
    }
    let pipe = cfg.pipeline()?;
    let (ds, splits) = open(&cfg)?;
    let db = ds.reference_database::<f64>(&splits.reference, pipe.resize)?;
    let case = target_case(args, &ds, &pipe)?;
    let assessment = assess_case(&case, &db, &pipe, calib)?;
    record_splits(&cfg, &splits)?;
    match &args.run.out {
        Some(path) => write_json(path, &assessment),
        None => {
            print!("{}", to_json(&assessment)?);
            Ok(())
        }
    }
}

pub fn rca(args: &CaseArgs) -> anyhow::Result<()> {
    assess(args, None)
}

pub fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.calib)
        .with_context(|| format!("reading {}", args.calib.display()))?;
    let calib: ConformalCalibration<f64> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.calib.display()))?;
    assess(&args.case, Some(&calib))
}

pub fn calibrate(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::from_run_args(args)?;
    let out = match (&args.out, &cfg.out_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("calib.json"),
        (None, None) => anyhow::bail!(UsageError("give --out or --out-dir".into())),
    };
    let pipe = cfg.pipeline()?;
    let (ds, splits) = open(&cfg)?;
    let run = calibrate_dataset::<f64>(&ds, &splits, &pipe)?;
    write_json(&out, &run.calibration)?;
    record_splits(&cfg, &splits)?;
    eprintln!(
        "q_hat = {} from {} calibration cases",
        run.calibration.q_hat, run.calibration.n
    );
    Ok(())
}

pub fn eval(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::from_run_args(args)?;
    let out_dir = cfg.out_dir()?.to_path_buf();
    let pipe = cfg.pipeline()?;
    let (ds, splits) = open(&cfg)?;
    if splits.test.is_empty() {
        return Err(segqc::Error::Empty("test split").into());
    }
    let run = calibrate_dataset::<f64>(&ds, &splits, &pipe)?;
    let db = ds.reference_database::<f64>(&splits.reference, pipe.resize)?;
    let cases = load_cases::<f64>(&ds, &splits.test, pipe.resize)?;
    let report = evaluate_cases(&cases, &db, &pipe, Some(&run.calibration))?;

    write_json(&out_dir.join("calib.json"), &run.calibration)?;
    record_splits(&cfg, &splits)?;
    emit(&report, ReportFormat::Json, out_dir.join("report.json"))?;
    emit(&report, ReportFormat::Csv, out_dir.join("report.csv"))?;
    print!("{}", to_json(&report.summary)?);
    Ok(())
}

#[derive(Serialize)]
struct SynthSummary {
    config: SyntheticConfig,
    trials: usize,
    mean_coverage: f64,
    mean_width: f64,
    outcomes: Vec<TrialOutcome<f64>>,
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::from_synth_args(args)?;
    let outcomes = (0..cfg.synth.trials as u64)
        .into_par_iter()
        .map(|i| run_synthetic_trial::<f64>(&cfg.synthetic(i)))
        .collect::<segqc::Result<Vec<_>>>()?;
    let n = outcomes.len() as f64;
    let summary = SynthSummary {
        config: cfg.synthetic(0),
        trials: outcomes.len(),
        mean_coverage: outcomes.iter().map(|o| o.coverage).sum::<f64>() / n,
        mean_width: outcomes.iter().map(|o| o.mean_width).sum::<f64>() / n,
        outcomes,
    };
    let json = to_json(&summary)?;
    if let Some(dir) = &cfg.out_dir {
        write_json(&dir.join("synth.json"), &summary)?;
        let mut csv = String::from("seed,coverage,mean_width,q_hat\n");
        for o in &summary.outcomes {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                o.seed, o.coverage, o.mean_width, o.q_hat
            ));
        }
        write_atomic(dir.join("synth.csv"), csv.as_bytes())?;
    }
    print!("{json}");
    Ok(())
}
