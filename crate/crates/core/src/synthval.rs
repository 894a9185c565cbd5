//! Synthetic validation under exact exchangeability, plus mask degradation
//! for end-to-end pipeline tests.
//!
//! All randomness comes from [`SeededRng`], a xoshiro256++ generator seeded
//! through SplitMix64. Uniforms are `(next_u64 >> 11) · 2⁻⁵³` and normals use
//! the cosine branch of Box–Muller, one normal per two uniforms, so streams
//! are reproducible at the algorithm level.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    calibrate, empirical_coverage, predict_interval, CalibrationRecord, ConformalParams,
};
use crate::error::{Error, Result};
use crate::metrics::EvaluationMetric;
use crate::raster::LabelMask;
use crate::rca::ScoreSet;
use crate::scalar::{clamp, Scalar};

#[derive(Debug, Clone)]
pub struct SeededRng(Xoshiro256PlusPlus);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal via Box–Muller.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Beta(2, 2) variate: the median of three independent uniforms.
pub fn sample_beta22<T: Scalar>(rng: &mut SeededRng) -> T {
    let (a, b, c) = (rng.next_f64(), rng.next_f64(), rng.next_f64());
    T::lit(a.max(b).min(a.min(b).max(c)))
}

/// `m` noisy copies of `y_true`, each `clip(y_true + N(0, sigma²), 0, 1)`.
pub fn synth_score_set<T: Scalar>(
    y_true: T,
    m: usize,
    sigma: T,
    rng: &mut SeededRng,
) -> Result<ScoreSet<T>> {
    if !(y_true >= T::zero() && y_true <= T::one()) {
        return Err(Error::InvalidArgument(format!(
            "y_true = {y_true} outside [0, 1]"
        )));
    }
    if !(sigma >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "sigma = {sigma} is negative"
        )));
    }
    let scores: Vec<T> = (0..m)
        .map(|_| {
            clamp(
                y_true + sigma * T::lit(rng.next_normal()),
                T::zero(),
                T::one(),
            )
        })
        .collect();
    ScoreSet::from_scores(EvaluationMetric::Dsc, &scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_cal: usize,
    pub n_test: usize,
    pub ref_size: usize,
    pub noise_sigma: f64,
    pub alpha: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_cal: 200,
            n_test: 2000,
            ref_size: 32,
            noise_sigma: 0.1,
            alpha: 0.1,
            p_low: 0.4,
            p_high: 0.95,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cal == 0 || self.n_test == 0 || self.ref_size == 0 {
            return Err(Error::InvalidArgument(
                "n_cal, n_test and ref_size must be at least 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise_sigma must be non-negative".into(),
            ));
        }
        self.params().validate()
    }

    pub fn params(&self) -> ConformalParams {
        ConformalParams {
            alpha: self.alpha,
            p_low: self.p_low,
            p_high: self.p_high,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome<T> {
    pub seed: u64,
    pub coverage: T,
    pub mean_width: T,
    pub q_hat: T,
}

/// One calibrate-then-test round on Beta(2, 2) truths with Gaussian RCA noise.
///
/// The first `n_cal` draws calibrate, the remaining `n_test` are predicted.
pub fn run_synthetic_trial<T: Scalar>(cfg: &SyntheticConfig) -> Result<TrialOutcome<T>> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let sigma = T::lit(cfg.noise_sigma);
    let mut draw = || -> Result<(ScoreSet<T>, T)> {
        let y = sample_beta22::<T>(&mut rng);
        Ok((synth_score_set(y, cfg.ref_size, sigma, &mut rng)?, y))
    };
    let calibration = (0..cfg.n_cal)
        .map(|i| draw().map(|(s, y)| CalibrationRecord::new(format!("cal{i}"), s, y)))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.n_test)
        .map(|_| draw())
        .collect::<Result<Vec<_>>>()?;

    let calib = calibrate(&calibration, &cfg.params())?;
    let intervals = test
        .iter()
        .map(|(s, _)| predict_interval(s, &calib))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<T> = test.iter().map(|(_, y)| *y).collect();
    let coverage = empirical_coverage(&intervals, &truths)?;
    let mean_width =
        intervals.iter().map(|iv| iv.width()).sum::<T>() / T::from_count(intervals.len());
    Ok(TrialOutcome {
        seed: cfg.seed,
        coverage,
        mean_width,
        q_hat: calib.q_hat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Degradation {
    Erode,
    Dilate,
    Translate(isize, isize),
}

fn label_at(mask: &LabelMask, x: isize, y: isize) -> u8 {
    let (w, h) = mask.dims();
    if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
        0
    } else {
        mask.get(x as usize, y as usize)
    }
}

const NEIGHBORS: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

fn apply(mask: &LabelMask, op: Degradation) -> LabelMask {
    let (w, h) = mask.dims();
    LabelMask::from_fn(w, h, mask.class_count(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        let here = label_at(mask, x, y);
        match op {
            // Foreground pixels touching a different label (or the edge) become background.
            Degradation::Erode => {
                if here != 0
                    && NEIGHBORS
                        .iter()
                        .any(|&(dx, dy)| label_at(mask, x + dx, y + dy) != here)
                {
                    0
                } else {
                    here
                }
            }
            // Background pixels take the first foreground 4-neighbor label.
            Degradation::Dilate => {
                if here == 0 {
                    NEIGHBORS
                        .iter()
                        .map(|&(dx, dy)| label_at(mask, x + dx, y + dy))
                        .find(|&l| l != 0)
                        .unwrap_or(0)
                } else {
                    here
                }
            }
            Degradation::Translate(dx, dy) => label_at(mask, x - dx, y - dy),
        }
    })
}

/// Applies `severity` random rounds of 1 px erosion, 1 px dilation or a 1 px shift.
pub fn degrade_mask(mask: &LabelMask, severity: usize, rng: &mut SeededRng) -> LabelMask {
    let mut out = mask.clone();
    for _ in 0..severity {
        let op = match rng.below(3) {
            0 => Degradation::Erode,
            1 => Degradation::Dilate,
            _ => match rng.below(4) {
                0 => Degradation::Translate(1, 0),
                1 => Degradation::Translate(-1, 0),
                2 => Degradation::Translate(0, 1),
                _ => Degradation::Translate(0, -1),
            },
        };
        out = apply(&out, op);
    }
    out
}
