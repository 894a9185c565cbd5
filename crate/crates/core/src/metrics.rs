//! Agreement metrics between two label masks.
//!
//! DSC is computed by pixel counting. Boundary distances use the exact
//! Euclidean distance transform of the other mask's boundary, so both
//! Hausdorff and ASSD are exact over pixel centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::LabelMask;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvaluationMetric {
    #[default]
    Dsc,
    Hausdorff,
    Assd,
}

impl EvaluationMetric {
    /// Evaluates the metric, macro-averaged over foreground classes.
    pub fn evaluate<T: Scalar>(self, pred: &LabelMask, gt: &LabelMask) -> Result<T> {
        match self {
            EvaluationMetric::Dsc => dsc_multiclass(pred, gt),
            EvaluationMetric::Hausdorff => per_class_mean(pred, gt, |a, b, w, h| {
                Ok(surface_distances::<T>(a, b, w, h)?.hausdorff)
            }),
            EvaluationMetric::Assd => per_class_mean(pred, gt, |a, b, w, h| {
                Ok(surface_distances::<T>(a, b, w, h)?.assd)
            }),
        }
    }

    /// True for metrics where larger values mean better agreement.
    pub fn higher_is_better(self) -> bool {
        matches!(self, EvaluationMetric::Dsc)
    }

    pub fn name(self) -> &'static str {
        match self {
            EvaluationMetric::Dsc => "dsc",
            EvaluationMetric::Hausdorff => "hausdorff",
            EvaluationMetric::Assd => "assd",
        }
    }
}

impl std::str::FromStr for EvaluationMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dsc" | "dice" => Ok(EvaluationMetric::Dsc),
            "hausdorff" | "hd" => Ok(EvaluationMetric::Hausdorff),
            "assd" => Ok(EvaluationMetric::Assd),
            other => Err(Error::InvalidArgument(format!("unknown metric {other}"))),
        }
    }
}

fn check_pair(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            found: pred.dims(),
        });
    }
    Ok(())
}

fn check_binary(m: &LabelMask) -> Result<()> {
    if !m.is_binary() {
        return Err(Error::InvalidArgument(
            "binary metric requires labels in {0, 1}".into(),
        ));
    }
    Ok(())
}

/// Dice from confusion counts; both-empty is perfect agreement.
fn dice_from_counts<T: Scalar>(tp: usize, fp: usize, fn_: usize) -> T {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        T::one()
    } else {
        T::from_count(2 * tp) / T::from_count(denom)
    }
}

fn class_dice<T: Scalar>(pred: &LabelMask, gt: &LabelMask, class: u8) -> T {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p == class, g == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    dice_from_counts(tp, fp, fn_)
}

/// `2·TP / (2·TP + FP + FN)` on binary masks.
pub fn dsc_binary<T: Scalar>(pred: &LabelMask, gt: &LabelMask) -> Result<T> {
    check_pair(pred, gt)?;
    check_binary(pred)?;
    check_binary(gt)?;
    Ok(class_dice(pred, gt, 1))
}

/// Unweighted mean of per-class Dice over foreground classes `1..class_count`.
pub fn dsc_multiclass<T: Scalar>(pred: &LabelMask, gt: &LabelMask) -> Result<T> {
    check_pair(pred, gt)?;
    if pred.class_count() != gt.class_count() {
        return Err(Error::ClassCountMismatch {
            expected: gt.class_count(),
            found: pred.class_count(),
        });
    }
    let classes = gt.class_count() - 1;
    let total: T = (1..gt.class_count())
        .map(|c| class_dice::<T>(pred, gt, c as u8))
        .sum();
    Ok(total / T::from_count(classes))
}

fn per_class_mean<T: Scalar>(
    pred: &LabelMask,
    gt: &LabelMask,
    f: impl Fn(&[bool], &[bool], usize, usize) -> Result<T>,
) -> Result<T> {
    check_pair(pred, gt)?;
    if pred.class_count() != gt.class_count() {
        return Err(Error::ClassCountMismatch {
            expected: gt.class_count(),
            found: pred.class_count(),
        });
    }
    let (w, h) = gt.dims();
    let mut acc = T::zero();
    for c in 1..gt.class_count() {
        let a = pred.class_indicator(c as u8);
        let b = gt.class_indicator(c as u8);
        acc = acc + f(&a, &b, w, h)?;
    }
    Ok(acc / T::from_count(gt.class_count() - 1))
}

/// Foreground pixels with at least one 4-neighbor outside the foreground.
/// Neighbors beyond the raster edge count as outside.
pub fn boundary(fg: &[bool], width: usize, height: usize) -> Vec<bool> {
    let at = |x: isize, y: isize| {
        x >= 0
            && y >= 0
            && (x as usize) < width
            && (y as usize) < height
            && fg[y as usize * width + x as usize]
    };
    let mut out = vec![false; fg.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(x, y) && !(at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

/// Lower envelope of parabolas for one row/column (Felzenszwalb & Huttenlocher).
fn edt_1d<T: Scalar>(f: &[T], out: &mut [T], v: &mut [usize], z: &mut [T]) {
    let n = f.len();
    let inf = T::infinity();
    let two = T::lit(2.0);
    // Skip leading infinite samples; they never contribute.
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.iter_mut().for_each(|o| *o = inf);
        return;
    };
    let mut k = 0usize;
    v[0] = first;
    z[0] = -inf;
    z[1] = inf;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = T::from_count(q);
        let mut s;
        loop {
            let p = v[k];
            let pf = T::from_count(p);
            s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (two * (qf - pf));
            // z[0] is -inf, so this never pops the first parabola.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = T::from_count(q);
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - T::from_count(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel center to the nearest `true` pixel.
/// Returns all `+inf` when `features` is empty.
pub fn squared_edt<T: Scalar>(features: &[bool], width: usize, height: usize) -> Vec<T> {
    let inf = T::infinity();
    let n = width.max(height);
    let mut v = vec![0usize; n];
    let mut z = vec![T::zero(); n + 1];
    let mut col_in = vec![T::zero(); height];
    let mut col_out = vec![T::zero(); height];
    let mut grid: Vec<T> = features
        .iter()
        .map(|&b| if b { T::zero() } else { inf })
        .collect();
    for x in 0..width {
        for y in 0..height {
            col_in[y] = grid[y * width + x];
        }
        edt_1d(&col_in, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![T::zero(); width];
    for y in 0..height {
        let row = &grid[y * width..(y + 1) * width];
        edt_1d(row, &mut row_out, &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&row_out);
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances<T> {
    pub hausdorff: T,
    pub assd: T,
}

/// Boundary distances between two binary foregrounds over pixel centers.
pub fn surface_distances<T: Scalar>(
    a: &[bool],
    b: &[bool],
    width: usize,
    height: usize,
) -> Result<SurfaceDistances<T>> {
    if !a.iter().any(|&p| p) || !b.iter().any(|&p| p) {
        return Err(Error::UndefinedMetric(
            "boundary distance requires nonempty foregrounds".into(),
        ));
    }
    let ba = boundary(a, width, height);
    let bb = boundary(b, width, height);
    let da = squared_edt::<T>(&ba, width, height);
    let db = squared_edt::<T>(&bb, width, height);
    let mut max = T::zero();
    let mut sum = T::zero();
    let mut count = 0usize;
    for (on, dist) in [(&ba, &db), (&bb, &da)] {
        for (i, _) in on.iter().enumerate().filter(|(_, &p)| p) {
            let d = dist[i].sqrt();
            max = max.max(d);
            sum = sum + d;
            count += 1;
        }
    }
    Ok(SurfaceDistances {
        hausdorff: max,
        assd: sum / T::from_count(count),
    })
}

fn binary_fg(pred: &LabelMask, gt: &LabelMask) -> Result<(Vec<bool>, Vec<bool>)> {
    check_pair(pred, gt)?;
    check_binary(pred)?;
    check_binary(gt)?;
    Ok((pred.class_indicator(1), gt.class_indicator(1)))
}

/// Symmetric Hausdorff distance between the two foreground boundaries.
pub fn hausdorff<T: Scalar>(pred: &LabelMask, gt: &LabelMask) -> Result<T> {
    let (a, b) = binary_fg(pred, gt)?;
    Ok(surface_distances::<T>(&a, &b, gt.width(), gt.height())?.hausdorff)
}

/// Average symmetric surface distance.
pub fn assd<T: Scalar>(pred: &LabelMask, gt: &LabelMask) -> Result<T> {
    let (a, b) = binary_fg(pred, gt)?;
    Ok(surface_distances::<T>(&a, &b, gt.width(), gt.height())?.assd)
}
