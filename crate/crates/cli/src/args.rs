use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Segmentation quality control: RCA point estimates and conformal intervals.
#[derive(Debug, Parser)]
#[command(name = "segqc", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the dataset's embeddings.jsonl and report its size.
    Index(IndexArgs),
    /// RCA score set and point estimate for one case.
    Rca(CaseArgs),
    /// Calibrate a conformal threshold on the calibration split.
    Calibrate(RunArgs),
    /// Conformal interval for one case from a saved calibration.
    Predict(PredictArgs),
    /// Monte-Carlo coverage check on synthetic score sets.
    Synth(SynthArgs),
    /// Calibrate, then score the test split against ground truth.
    Eval(RunArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub dataset: PathBuf,
}

/// Settings shared by dataset-backed commands. Each flag overrides the
/// matching field of `--config`.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// JSON run configuration; flags take precedence over its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// dsc | hausdorff | assd [default: dsc]
    #[arg(long)]
    pub metric: Option<String>,
    /// atlas | external:<manifest.json> [default: atlas]
    #[arg(long)]
    pub segmenter: Option<String>,
    /// random | cosine [default: cosine]
    #[arg(long)]
    pub retrieval: Option<String>,
    /// References per case [default: all]
    #[arg(long)]
    pub k_ref: Option<usize>,
    /// Miscoverage level [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Lower quantile level of the score set [default: 0.4]
    #[arg(long)]
    pub p_low: Option<f64>,
    /// Upper quantile level of the score set [default: 0.95]
    #[arg(long)]
    pub p_high: Option<f64>,
    /// cqr | residual | lw [default: cqr]
    #[arg(long)]
    pub kind: Option<String>,
    /// max | mean [default: max]
    #[arg(long)]
    pub mode: Option<String>,
    /// Split and random-retrieval seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// WxH working resolution, or `none` [default: 256x256]
    #[arg(long)]
    pub resize: Option<String>,
    /// Directory for calib.json, splits.json and reports
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Output file (calibrate) [default: <out-dir>/calib.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaseArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Case id inside the dataset
    #[arg(long, conflicts_with_all = ["target", "pred"])]
    pub target_id: Option<String>,
    /// Target image file
    #[arg(long, requires = "pred")]
    pub target: Option<PathBuf>,
    /// Predicted mask for the target image
    #[arg(long, requires = "target")]
    pub pred: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    /// Calibration produced by `segqc calibrate`
    #[arg(long)]
    pub calib: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of independent trials [default: 50]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Seed of the first trial; trial i uses seed + i [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 200]
    #[arg(long)]
    pub n_cal: Option<usize>,
    /// [default: 2000]
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Score set size [default: 32]
    #[arg(long)]
    pub m: Option<usize>,
    /// Score noise standard deviation [default: 0.1]
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub p_low: Option<f64>,
    #[arg(long)]
    pub p_high: Option<f64>,
    /// Also write per-trial rows to <out-dir>/synth.csv and synth.json
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
