//! Precomputed object detections for one image.
//!
//! On disk each image is a pair of files in a features directory:
//!
//! * `<image_id>.json` – `{"image_id", "width", "height", "appearance_dim",
//!   "objects": [{"label", "box": [x1, y1, x2, y2]}]}` with box coordinates
//!   normalized to `[0, 1]`;
//! * `<image_id>.bin` – `objects × 2048` little-endian `f32` appearance
//!   vectors, row-major, in the same order as `objects`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const APPEARANCE_DIM: usize = 2048;
pub const BOX_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct VisualObject {
    pub label: String,
    /// `(x1, y1, x2, y2)` normalized to the image size.
    pub bbox: [f32; BOX_DIM],
    pub appearance: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureSet {
    pub image_id: String,
    /// Pixel size of the source image, for drawing boxes.
    pub width: u32,
    pub height: u32,
    pub objects: Vec<VisualObject>,
}

#[derive(Serialize, Deserialize)]
struct FeatureMeta {
    image_id: String,
    width: u32,
    height: u32,
    appearance_dim: usize,
    objects: Vec<ObjectMeta>,
}

#[derive(Serialize, Deserialize)]
struct ObjectMeta {
    label: String,
    #[serde(rename = "box")]
    bbox: [f32; BOX_DIM],
}

impl VisualFeatureSet {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.label.clone()).collect()
    }

    pub fn validate(&self, max_objects: usize) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > max_objects {
            return Err(Error::invalid(format!(
                "image `{}` has {} objects, expected 1..={max_objects}",
                self.image_id,
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.appearance.len() != APPEARANCE_DIM {
                return Err(Error::invalid(format!(
                    "object {i} of `{}` has appearance dim {}, expected {APPEARANCE_DIM}",
                    self.image_id,
                    o.appearance.len()
                )));
            }
            let [x1, y1, x2, y2] = o.bbox;
            let in_unit = o.bbox.iter().all(|v| (0.0..=1.0).contains(v));
            if !in_unit || !(x1 < x2 && y1 < y2) {
                return Err(Error::invalid(format!(
                    "object {i} of `{}` has invalid box {:?}",
                    self.image_id, o.bbox
                )));
            }
            if o.appearance.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "object {i} of `{}` has non-finite appearance values",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        check_image_id(&self.image_id)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = FeatureMeta {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            appearance_dim: APPEARANCE_DIM,
            objects: self
                .objects
                .iter()
                .map(|o| ObjectMeta {
                    label: o.label.clone(),
                    bbox: o.bbox,
                })
                .collect(),
        };
        let (json_path, bin_path) = paths(dir, &self.image_id);
        let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json("features", e))?;
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        let blob: Vec<u8> = self
            .objects
            .iter()
            .flat_map(|o| o.appearance.iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        std::fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
        Ok(())
    }

    /// Reads `<dir>/<image_id>.{json,bin}`. A missing metadata file is
    /// [`Error::NotFound`].
    pub fn load(dir: impl AsRef<Path>, image_id: &str) -> Result<Self> {
        check_image_id(image_id)?;
        let (json_path, bin_path) = paths(dir.as_ref(), image_id);
        let raw = match std::fs::read(&json_path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("features for image `{image_id}`")))
            }
            Err(e) => return Err(Error::io(&json_path, e)),
        };
        let meta: FeatureMeta = serde_json::from_slice(&raw)
            .map_err(|e| Error::json(json_path.display().to_string(), e))?;
        if meta.appearance_dim != APPEARANCE_DIM {
            return Err(Error::invalid(format!(
                "`{}` declares appearance dim {}, expected {APPEARANCE_DIM}",
                json_path.display(),
                meta.appearance_dim
            )));
        }
        let blob = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let row_bytes = APPEARANCE_DIM * 4;
        if blob.len() != meta.objects.len() * row_bytes {
            return Err(Error::Integrity(format!(
                "`{}` holds {} bytes, expected {} objects x {APPEARANCE_DIM} f32",
                bin_path.display(),
                blob.len(),
                meta.objects.len()
            )));
        }
        let objects = meta
            .objects
            .into_iter()
            .zip(blob.chunks_exact(row_bytes))
            .map(|(o, bytes)| VisualObject {
                label: o.label,
                bbox: o.bbox,
                appearance: bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            })
            .collect();
        Ok(Self {
            image_id: meta.image_id,
            width: meta.width,
            height: meta.height,
            objects,
        })
    }
}

fn check_image_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && !id.contains(['/', '\\', '\0']);
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("`{id}` is not a valid image id")))
    }
}

fn paths(dir: &Path, image_id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{image_id}.json")),
        dir.join(format!("{image_id}.bin")),
    )
}

/// Lookup of visual features by image id.
pub trait FeatureSource: Send + Sync {
    /// [`Error::NotFound`] when the image has no features.
    fn features(&self, image_id: &str) -> Result<Arc<VisualFeatureSet>>;
}

impl FeatureSource for HashMap<String, Arc<VisualFeatureSet>> {
    fn features(&self, image_id: &str) -> Result<Arc<VisualFeatureSet>> {
        self.get(image_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("features for image `{image_id}`")))
    }
}

/// Directory-backed features, loaded on first request and kept in memory.
#[derive(Debug)]
pub struct FeatureStore {
    dir: PathBuf,
    max_objects: usize,
    cache: RwLock<HashMap<String, Arc<VisualFeatureSet>>>,
}

impl FeatureStore {
    pub fn new(dir: impl Into<PathBuf>, max_objects: usize) -> Self {
        Self {
            dir: dir.into(),
            max_objects,
            cache: RwLock::default(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl FeatureSource for FeatureStore {
    fn features(&self, image_id: &str) -> Result<Arc<VisualFeatureSet>> {
        if let Some(f) = self.cache.read().unwrap_or_else(|e| e.into_inner()).get(image_id) {
            return Ok(f.clone());
        }
        let loaded = VisualFeatureSet::load(&self.dir, image_id)?;
        loaded.validate(self.max_objects)?;
        let loaded = Arc::new(loaded);
        self.cache
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .entry(image_id.to_owned())
            .or_insert_with(|| loaded.clone());
        Ok(loaded)
    }
}
