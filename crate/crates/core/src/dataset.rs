//! On-disk dataset layout.
//!
//! ```text
//! <root>/dataset.json        manifest: class_count and items (id, optional role)
//! <root>/images/<id>.png     grayscale image
//! <root>/masks/<id>.png      ground-truth labels
//! <root>/predictions/<id>.png  predicted labels (calibration and test items)
//! <root>/embeddings.jsonl    optional, one {"id", "vec"} record per line
//! ```
//!
//! Items without a role are split into reference/calibration/test by a
//! seeded shuffle; explicit roles always win.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{load_image, load_mask, GrayImage, LabelMask};
use crate::rca::{ReferenceDatabase, ReferenceRecord};
use crate::retrieval::{load_embeddings, EmbeddingIndex, EmbeddingVector};
use crate::scalar::Scalar;
use crate::synthval::SeededRng;

pub const MANIFEST_FILE: &str = "dataset.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reference,
    Calibration,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_count: usize,
    pub items: Vec<ManifestItem>,
}

/// Fractions for reference / calibration / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub reference: f64,
    pub calibration: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            reference: 0.8,
            calibration: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.reference, self.calibration, self.test];
        if parts.iter().any(|f| !(*f >= 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be non-negative and sum to 1: {parts:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub reference: Vec<String>,
    pub calibration: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn ids(&self, role: Role) -> &[String] {
        match role {
            Role::Reference => &self.reference,
            Role::Calibration => &self.calibration,
            Role::Test => &self.test,
        }
    }
}

/// One image with whatever masks exist for it.
#[derive(Debug, Clone)]
pub struct Case<T> {
    pub id: String,
    pub image: GrayImage<T>,
    pub gt: Option<LabelMask>,
    pub prediction: Option<LabelMask>,
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    manifest_hash: String,
    embeddings: Option<EmbeddingIndex>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        if !(2..=crate::raster::MAX_CLASSES).contains(&manifest.class_count) {
            return Err(Error::Dataset(format!(
                "class_count {} out of range",
                manifest.class_count
            )));
        }
        let mut ids: Vec<&str> = manifest.items.iter().map(|i| i.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateId(w[0].to_string()));
        }
        let emb_path = root.join(EMBEDDINGS_FILE);
        let embeddings = if emb_path.exists() {
            Some(load_embeddings(&emb_path)?)
        } else {
            None
        };
        Ok(Self {
            root,
            manifest_hash: hex(&Sha256::digest(&bytes)),
            manifest,
            embeddings,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_count
    }

    pub fn embeddings(&self) -> Option<&EmbeddingIndex> {
        self.embeddings.as_ref()
    }

    /// SHA-256 of the manifest bytes.
    pub fn manifest_hash(&self) -> &str {
        &self.manifest_hash
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.png"))
    }

    pub fn prediction_path(&self, id: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{id}.png"))
    }

    /// Resolves roles; unassigned items are shuffled with `seed` and cut by `fractions`.
    pub fn splits(&self, fractions: &SplitFractions, seed: u64) -> Result<Splits> {
        fractions.validate()?;
        let mut splits = Splits::default();
        let mut free = Vec::new();
        for item in &self.manifest.items {
            match item.role {
                Some(Role::Reference) => splits.reference.push(item.id.clone()),
                Some(Role::Calibration) => splits.calibration.push(item.id.clone()),
                Some(Role::Test) => splits.test.push(item.id.clone()),
                None => free.push(item.id.clone()),
            }
        }
        SeededRng::new(seed).shuffle(&mut free);
        let n = free.len();
        let n_ref = ((fractions.reference * n as f64).round() as usize).min(n);
        let n_cal = ((fractions.calibration * n as f64).round() as usize).min(n - n_ref);
        let mut rest = free.into_iter();
        splits.reference.extend(rest.by_ref().take(n_ref));
        splits.calibration.extend(rest.by_ref().take(n_cal));
        splits.test.extend(rest);
        Ok(splits)
    }

    /// Loads one item, resized to `resize` when given. Missing masks are `None`.
    pub fn load_case<T: Scalar>(
        &self,
        id: &str,
        resize: Option<(usize, usize)>,
    ) -> Result<Case<T>> {
        if !self.manifest.items.iter().any(|i| i.id == id) {
            return Err(Error::MissingId(id.to_string()));
        }
        let image = load_image::<T>(self.image_path(id))?;
        let load_opt = |p: PathBuf| -> Result<Option<LabelMask>> {
            if p.exists() {
                load_mask(&p, self.class_count()).map(Some)
            } else {
                Ok(None)
            }
        };
        let gt = load_opt(self.mask_path(id))?;
        let prediction = load_opt(self.prediction_path(id))?;
        for m in gt.iter().chain(prediction.iter()) {
            if m.dims() != image.dims() {
                return Err(Error::DimensionMismatch {
                    expected: image.dims(),
                    found: m.dims(),
                });
            }
        }
        let embedding = self.embeddings.as_ref().and_then(|e| e.get(id)).cloned();
        let mut case = Case {
            id: id.to_string(),
            image,
            gt,
            prediction,
            embedding,
        };
        if let Some((w, h)) = resize {
            case.image = case.image.resize_bilinear(w, h)?;
            case.gt = case.gt.map(|m| m.resize_nearest(w, h)).transpose()?;
            case.prediction = case
                .prediction
                .map(|m| m.resize_nearest(w, h))
                .transpose()?;
        }
        Ok(case)
    }

    /// Reference database from `ids`; every reference needs a ground-truth mask.
    pub fn reference_database<T: Scalar>(
        &self,
        ids: &[String],
        resize: Option<(usize, usize)>,
    ) -> Result<ReferenceDatabase<T>> {
        let records = ids
            .iter()
            .map(|id| {
                let case = self.load_case::<T>(id, resize)?;
                let gt = case.gt.ok_or_else(|| {
                    Error::Dataset(format!("reference {id} has no ground-truth mask"))
                })?;
                let mut rec = ReferenceRecord::new(id.clone(), case.image, gt)?;
                rec.embedding = case.embedding;
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()?;
        ReferenceDatabase::new(records)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a dataset in the layout above. Used by tests and tooling.
pub fn write_dataset<T: Scalar>(
    root: impl AsRef<Path>,
    class_count: usize,
    items: &[(ManifestItem, &Case<T>)],
) -> Result<()> {
    let root = root.as_ref();
    for sub in ["images", "masks", "predictions"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut emb = String::new();
    for (item, case) in items {
        crate::raster::save_image(
            &case.image,
            root.join("images").join(format!("{}.png", item.id)),
        )?;
        if let Some(gt) = &case.gt {
            crate::raster::save_mask(gt, root.join("masks").join(format!("{}.png", item.id)))?;
        }
        if let Some(p) = &case.prediction {
            crate::raster::save_mask(p, root.join("predictions").join(format!("{}.png", item.id)))?;
        }
        if let Some(e) = &case.embedding {
            emb.push_str(&serde_json::to_string(
                &serde_json::json!({"id": item.id, "vec": e.values()}),
            )?);
            emb.push('\n');
        }
    }
    if !emb.is_empty() {
        crate::report::write_atomic(root.join(EMBEDDINGS_FILE), emb.as_bytes())?;
    }
    let manifest = Manifest {
        class_count,
        items: items.iter().map(|(i, _)| i.clone()).collect(),
    };
    crate::report::write_atomic(
        root.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}
