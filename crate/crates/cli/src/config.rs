use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use segqc::conformal::{ConformalParams, NonconformityKind};
use segqc::dataset::SplitFractions;
use segqc::pipeline::{PipelineConfig, RetrievalMode, SegmenterChoice};
use segqc::retrieval::Similarity;
use segqc::segmenter::AtlasConfig;
use segqc::synthval::SyntheticConfig;
use segqc::{EvaluationMetric, PointEstimate};

use crate::args::{RunArgs, SynthArgs};
use crate::UsageError;

/// Everything that determines a run. Missing fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub splits: SplitFractions,
    pub metric: EvaluationMetric,
    /// `atlas` or `external:<manifest.json>`.
    pub segmenter: String,
    pub atlas: AtlasConfig,
    pub retrieval: RetrievalMode,
    pub similarity: Similarity,
    pub k_ref: Option<usize>,
    pub alpha: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub kind: NonconformityKind,
    pub mode: PointEstimate,
    pub seed: u64,
    /// Working resolution `[w, h]`; `null` keeps native sizes.
    pub resize: Option<[usize; 2]>,
    pub out_dir: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub trials: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub m: usize,
    pub sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            trials: 50,
            n_cal: d.n_cal,
            n_test: d.n_test,
            m: d.ref_size,
            sigma: d.noise_sigma,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = ConformalParams::default();
        Self {
            dataset: None,
            splits: SplitFractions::default(),
            metric: EvaluationMetric::Dsc,
            segmenter: "atlas".into(),
            atlas: AtlasConfig::default(),
            retrieval: RetrievalMode::Cosine,
            similarity: Similarity::Cosine,
            k_ref: None,
            alpha: c.alpha,
            p_low: c.p_low,
            p_high: c.p_high,
            kind: c.kind,
            mode: c.mode,
            seed: 0,
            resize: Some([256, 256]),
            out_dir: None,
            synth: SynthConfig::default(),
        }
    }
}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

fn parse_flag<T: std::str::FromStr<Err = segqc::Error>>(name: &str, v: &str) -> anyhow::Result<T> {
    v.parse()
        .map_err(|e: segqc::Error| usage(format!("--{name}: {e}")))
}

fn parse_resize(v: &str) -> anyhow::Result<Option<[usize; 2]>> {
    if v == "none" {
        return Ok(None);
    }
    let parsed = v
        .split_once(['x', 'X'])
        .and_then(|(w, h)| Some([w.parse().ok()?, h.parse().ok()?]));
    match parsed {
        Some([w, h]) if w > 0 && h > 0 => Ok(Some([w, h])),
        _ => Err(usage(format!("--resize: expected WxH or none, got {v}"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    fn base(config: Option<&Path>) -> anyhow::Result<Self> {
        config.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn from_run_args(a: &RunArgs) -> anyhow::Result<Self> {
        let mut c = Self::base(a.config.as_deref())?;
        if let Some(v) = &a.dataset {
            c.dataset = Some(v.clone());
        }
        if let Some(v) = &a.metric {
            c.metric = parse_flag("metric", v)?;
        }
        if let Some(v) = &a.segmenter {
            c.segmenter = v.clone();
        }
        if let Some(v) = &a.retrieval {
            c.retrieval = parse_flag("retrieval", v)?;
        }
        if a.k_ref.is_some() {
            c.k_ref = a.k_ref;
        }
        c.alpha = a.alpha.unwrap_or(c.alpha);
        c.p_low = a.p_low.unwrap_or(c.p_low);
        c.p_high = a.p_high.unwrap_or(c.p_high);
        if let Some(v) = &a.kind {
            c.kind = parse_flag("kind", v)?;
        }
        if let Some(v) = &a.mode {
            c.mode = parse_flag("mode", v)?;
        }
        c.seed = a.seed.unwrap_or(c.seed);
        if let Some(v) = &a.resize {
            c.resize = parse_resize(v)?;
        }
        if let Some(v) = &a.out_dir {
            c.out_dir = Some(v.clone());
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_synth_args(a: &SynthArgs) -> anyhow::Result<Self> {
        let mut c = Self::base(a.config.as_deref())?;
        let s = &mut c.synth;
        s.trials = a.trials.unwrap_or(s.trials);
        s.n_cal = a.n_cal.unwrap_or(s.n_cal);
        s.n_test = a.n_test.unwrap_or(s.n_test);
        s.m = a.m.unwrap_or(s.m);
        s.sigma = a.sigma.unwrap_or(s.sigma);
        c.seed = a.seed.unwrap_or(c.seed);
        c.alpha = a.alpha.unwrap_or(c.alpha);
        c.p_low = a.p_low.unwrap_or(c.p_low);
        c.p_high = a.p_high.unwrap_or(c.p_high);
        if let Some(v) = &a.out_dir {
            c.out_dir = Some(v.clone());
        }
        if c.synth.trials == 0 {
            return Err(usage("--trials must be at least 1".into()));
        }
        self::check(c.synthetic(0).validate())?;
        Ok(c)
    }

    fn validate(&self) -> anyhow::Result<()> {
        check(self.splits.validate())?;
        check(self.conformal().validate())?;
        check(self.atlas.validate())?;
        if self.k_ref == Some(0) {
            return Err(usage("k_ref must be at least 1".into()));
        }
        if self.segmenter != "atlas" && !self.segmenter.starts_with("external:") {
            return Err(usage(format!(
                "segmenter must be `atlas` or `external:<path>`, got {}",
                self.segmenter
            )));
        }
        Ok(())
    }

    pub fn conformal(&self) -> ConformalParams {
        ConformalParams {
            alpha: self.alpha,
            p_low: self.p_low,
            p_high: self.p_high,
            kind: self.kind,
            mode: self.mode,
        }
    }

    pub fn dataset(&self) -> anyhow::Result<&Path> {
        match &self.dataset {
            Some(p) => Ok(p),
            None => bail!(UsageError("--dataset is required".into())),
        }
    }

    pub fn out_dir(&self) -> anyhow::Result<&Path> {
        match &self.out_dir {
            Some(p) => Ok(p),
            None => bail!(UsageError("--out-dir is required".into())),
        }
    }

    pub fn pipeline(&self) -> anyhow::Result<PipelineConfig> {
        Ok(PipelineConfig {
            metric: self.metric,
            segmenter: SegmenterChoice::parse(&self.segmenter, self.atlas)?,
            retrieval: self.retrieval,
            similarity: self.similarity,
            k_ref: self.k_ref,
            conformal: self.conformal(),
            mode: self.mode,
            seed: self.seed,
            resize: self.resize.map(|[w, h]| (w, h)),
        })
    }

    pub fn synthetic(&self, trial: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_cal: self.synth.n_cal,
            n_test: self.synth.n_test,
            ref_size: self.synth.m,
            noise_sigma: self.synth.sigma,
            alpha: self.alpha,
            p_low: self.p_low,
            p_high: self.p_high,
            seed: self.seed.wrapping_add(trial),
        }
    }
}

/// Invalid parameter values are usage errors, not data errors.
fn check(r: segqc::Result<()>) -> anyhow::Result<()> {
    r.map_err(|e| match e {
        segqc::Error::InvalidArgument(msg) => usage(msg),
        other => other.into(),
    })
}
