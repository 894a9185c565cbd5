//! Reverse segmenters.
//!
//! A reverse segmenter takes the image under assessment together with its
//! predicted mask (used as pseudo ground truth) and segments a reference
//! image. The built-in [`AtlasSegmenter`] registers the assessed image onto
//! the reference with a 6-parameter affine transform and carries the mask
//! across; [`ExternalSegmenter`] reads masks produced by an outside model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_mask, GrayImage, LabelMask};
use crate::scalar::Scalar;

/// Maps query pixel coordinates `(x, y)` to atlas coordinates
/// `(a·x + b·y + tx, c·x + d·y + ty)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform2D<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
    pub tx: T,
    pub ty: T,
}

impl<T: Scalar> AffineTransform2D<T> {
    pub fn identity() -> Self {
        Self {
            a: T::one(),
            b: T::zero(),
            c: T::zero(),
            d: T::one(),
            tx: T::zero(),
            ty: T::zero(),
        }
    }

    pub fn translation(tx: T, ty: T) -> Self {
        Self {
            tx,
            ty,
            ..Self::identity()
        }
    }

    #[inline]
    pub fn apply(&self, x: T, y: T) -> (T, T) {
        (
            self.a * x + self.b * y + self.tx,
            self.c * x + self.d * y + self.ty,
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.a, self.b, self.c, self.d, self.tx, self.ty]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn coefficients(&self) -> [T; 6] {
        [self.a, self.b, self.c, self.d, self.tx, self.ty]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtlasConfig {
    /// Number of pyramid levels; level `i` of `n` works at `2^(n-1-i)` downsampling.
    pub pyramid_levels: usize,
    pub iterations_per_level: usize,
    /// Central finite-difference half-width in normalized parameter units.
    pub fd_step: f64,
    /// Initial descent step length in normalized parameter units.
    pub initial_step: f64,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            iterations_per_level: 100,
            fd_step: 1e-3,
            initial_step: 0.1,
        }
    }
}

impl AtlasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0
            || self.iterations_per_level == 0
            || !(self.fd_step > 0.0)
            || !(self.initial_step > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "atlas configuration must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Registration output with the objective value after every accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration<T> {
    pub transform: AffineTransform2D<T>,
    /// One trace per pyramid level, coarse to fine. Each starts with the
    /// objective at the level's initial parameters.
    pub trace: Vec<Vec<T>>,
}

/// Parameters in a resolution-independent frame: coordinates are centered and
/// scaled by half the longest side, so the same vector is valid at every
/// pyramid level.
#[derive(Debug, Clone, Copy)]
struct NormalizedParams<T>([T; 6]);

impl<T: Scalar> NormalizedParams<T> {
    fn identity() -> Self {
        Self([
            T::one(),
            T::zero(),
            T::zero(),
            T::one(),
            T::zero(),
            T::zero(),
        ])
    }

    /// Pixel-space transform for a raster of the given size.
    fn to_pixel(self, width: usize, height: usize) -> AffineTransform2D<T> {
        let [a, b, c, d, tu, tv] = self.0;
        let half = T::lit(0.5);
        let s = T::from_count(width.max(height)) * half;
        // pixel x -> normalized u = (x + 0.5 - w/2) / s
        let cx = T::from_count(width) * half - half;
        let cy = T::from_count(height) * half - half;
        AffineTransform2D {
            a,
            b,
            c,
            d,
            tx: cx - (a * cx + b * cy) + s * tu,
            ty: cy - (c * cx + d * cy) + s * tv,
        }
    }
}

fn mse<T: Scalar>(atlas: &GrayImage<T>, query: &GrayImage<T>, t: &AffineTransform2D<T>) -> T {
    let mut acc = T::zero();
    for y in 0..query.height() {
        let yf = T::from_count(y);
        for x in 0..query.width() {
            let (sx, sy) = t.apply(T::from_count(x), yf);
            let r = atlas.sample_bilinear(sx, sy) - query.get(x, y);
            acc = acc + r * r;
        }
    }
    acc / T::from_count(query.pixels().len())
}

/// Fits the affine transform minimizing the mean squared intensity difference
/// between `atlas` sampled at `T(x)` and `query(x)`.
///
/// Gradient descent on a coarse-to-fine pyramid with central finite
/// differences. Each iteration tries a step of the current length along the
/// negative normalized gradient; the step is accepted only if the objective
/// strictly decreases, otherwise the length is halved.
pub fn atlas_register<T: Scalar>(
    atlas: &GrayImage<T>,
    query: &GrayImage<T>,
    cfg: &AtlasConfig,
) -> Result<Registration<T>> {
    cfg.validate()?;
    if atlas.dims() != query.dims() {
        return Err(Error::DimensionMismatch {
            expected: query.dims(),
            found: atlas.dims(),
        });
    }
    let mut pyramid = vec![(atlas.clone(), query.clone())];
    for _ in 1..cfg.pyramid_levels {
        let (a, q) = pyramid.last().expect("nonempty");
        if a.width() < 8 || a.height() < 8 {
            break;
        }
        pyramid.push((a.downsample2(), q.downsample2()));
    }
    pyramid.reverse();

    let h = T::lit(cfg.fd_step);
    let two_h = h + h;
    let min_step = T::lit(cfg.initial_step * 1e-6);
    let mut params = NormalizedParams::<T>::identity();
    let mut trace = Vec::with_capacity(pyramid.len());
    for (a, q) in &pyramid {
        let (w, hgt) = q.dims();
        let cost = |p: NormalizedParams<T>| mse(a, q, &p.to_pixel(w, hgt));
        let mut current = cost(params);
        let mut level_trace = vec![current];
        let mut step = T::lit(cfg.initial_step);
        for _ in 0..cfg.iterations_per_level {
            let mut grad = [T::zero(); 6];
            for (i, g) in grad.iter_mut().enumerate() {
                let mut plus = params;
                let mut minus = params;
                plus.0[i] = plus.0[i] + h;
                minus.0[i] = minus.0[i] - h;
                *g = (cost(plus) - cost(minus)) / two_h;
            }
            let norm = grad.iter().map(|g| *g * *g).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                break;
            }
            let mut candidate = params;
            for (p, g) in candidate.0.iter_mut().zip(grad) {
                *p = *p - step * g / norm;
            }
            let next = cost(candidate);
            if next < current {
                params = candidate;
                current = next;
                level_trace.push(current);
            } else {
                step = step * T::lit(0.5);
                if step < min_step {
                    break;
                }
            }
        }
        trace.push(level_trace);
    }
    Ok(Registration {
        transform: params.to_pixel(query.width(), query.height()),
        trace,
    })
}

/// Nearest-neighbor label transfer: `out(x) = pseudo_gt[round(T(x))]`, with
/// background wherever `T(x)` falls outside `pseudo_gt`.
pub fn warp_mask<T: Scalar>(
    pseudo_gt: &LabelMask,
    t: &AffineTransform2D<T>,
    out_w: usize,
    out_h: usize,
) -> Result<LabelMask> {
    if !t.is_finite() {
        return Err(Error::InvalidArgument("non-finite transform".into()));
    }
    let (w, h) = pseudo_gt.dims();
    let (wf, hf) = (T::from_count(w), T::from_count(h));
    let half = T::lit(0.5);
    let mut labels = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let yf = T::from_count(y);
        for x in 0..out_w {
            let (sx, sy) = t.apply(T::from_count(x), yf);
            let (rx, ry) = ((sx + half).floor(), (sy + half).floor());
            let label = if rx >= T::zero() && ry >= T::zero() && rx < wf && ry < hf {
                pseudo_gt.get(rx.to_usize().unwrap_or(0), ry.to_usize().unwrap_or(0))
            } else {
                0
            };
            labels.push(label);
        }
    }
    LabelMask::new(out_w, out_h, labels, pseudo_gt.class_count())
}

/// Registers `target` onto `query` and transfers `pseudo_gt` into query space.
pub fn atlas_segment<T: Scalar>(
    target: &GrayImage<T>,
    pseudo_gt: &LabelMask,
    query: &GrayImage<T>,
    cfg: &AtlasConfig,
) -> Result<LabelMask> {
    if target.dims() != pseudo_gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: target.dims(),
            found: pseudo_gt.dims(),
        });
    }
    let reg = atlas_register(target, query, cfg)?;
    warp_mask(pseudo_gt, &reg.transform, query.width(), query.height())
}

/// A reference image handed to a reverse segmenter.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a, T> {
    pub id: &'a str,
    pub image: &'a GrayImage<T>,
}

/// Segmenter built from a single (image, mask) pair and applied to references.
///
/// Implementations must be deterministic and return a mask with the query's
/// dimensions and the pseudo ground truth's class count.
pub trait ReverseSegmenter<T: Scalar>: Send + Sync {
    fn segment(
        &self,
        target: &GrayImage<T>,
        pseudo_gt: &LabelMask,
        query: Query<'_, T>,
    ) -> Result<LabelMask>;
}

#[derive(Debug, Clone, Default)]
pub struct AtlasSegmenter {
    pub config: AtlasConfig,
}

impl AtlasSegmenter {
    pub fn new(config: AtlasConfig) -> Self {
        Self { config }
    }
}

impl<T: Scalar> ReverseSegmenter<T> for AtlasSegmenter {
    fn segment(
        &self,
        target: &GrayImage<T>,
        pseudo_gt: &LabelMask,
        query: Query<'_, T>,
    ) -> Result<LabelMask> {
        atlas_segment(target, pseudo_gt, query.image, &self.config)
    }
}

/// Reference id to externally produced mask file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExternalManifest {
    pub masks: BTreeMap<String, PathBuf>,
}

impl ExternalManifest {
    /// Parses a JSON object of id to path; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut manifest: ExternalManifest = serde_json::from_str(text)?;
        for p in manifest.masks.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Loads the mask an external model produced for `query_id`.
pub fn external_segment(
    manifest: &ExternalManifest,
    query_id: &str,
    class_count: usize,
    dims: (usize, usize),
) -> Result<LabelMask> {
    let path = manifest
        .masks
        .get(query_id)
        .ok_or_else(|| Error::MissingId(query_id.to_string()))?;
    let mask = load_mask(path, class_count)?;
    if mask.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            found: mask.dims(),
        });
    }
    Ok(mask)
}

/// Reverse segmenter backed by precomputed mask files.
#[derive(Debug, Clone)]
pub struct ExternalSegmenter {
    pub manifest: ExternalManifest,
}

impl<T: Scalar> ReverseSegmenter<T> for ExternalSegmenter {
    fn segment(
        &self,
        _target: &GrayImage<T>,
        pseudo_gt: &LabelMask,
        query: Query<'_, T>,
    ) -> Result<LabelMask> {
        external_segment(
            &self.manifest,
            query.id,
            pseudo_gt.class_count(),
            query.image.dims(),
        )
    }
}
