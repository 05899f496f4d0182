//! COCO-convention annotation JSON: save, load, validate.
//!
//! One JSON file per split with `images`, `annotations` (`bbox` as
//! `[x, y, w, h]`), and `categories`. Generated files use category ids
//! `0..C-1`; external files with arbitrary ids load via the sorted-id order.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{BBox, LabeledBox};
use ndarray::Array3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub category_id: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: i64,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// A scene whose image loads lazily from disk.
#[derive(Debug, Clone)]
pub struct SceneRef {
    pub scene_id: String,
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub gt: Vec<LabeledBox>,
}

impl SceneRef {
    /// Decode the PNG into a `(3, H, W)` array in `[0, 1]`.
    pub fn load_image(&self) -> Result<Array3<f64>> {
        let img = image::open(&self.image_path)
            .map_err(|e| Error::Parse(format!("{}: {e}", self.image_path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Array3::zeros((3, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
            }
        }
        Ok(out)
    }
}

/// An annotation split resolved against its directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<SceneRef>,
    /// Category names in class-id order.
    pub categories: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }
}

/// Load and validate one split file. Boxes must lie inside their image and
/// category ids must appear in `categories`.
pub fn load_annotations(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let file: CocoFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new("."));

    let mut cat_ids: Vec<i64> = file.categories.iter().map(|c| c.id).collect();
    cat_ids.sort_unstable();
    cat_ids.dedup();
    if cat_ids.len() != file.categories.len() {
        return Err(Error::Validation("duplicate category ids".into()));
    }
    let class_of = |cat: i64| cat_ids.binary_search(&cat).ok();
    let mut names = vec![String::new(); cat_ids.len()];
    for c in &file.categories {
        names[class_of(c.id).unwrap()] = c.name.clone();
    }

    let mut scenes: BTreeMap<u64, SceneRef> = BTreeMap::new();
    for im in &file.images {
        scenes.insert(
            im.id,
            SceneRef {
                scene_id: format!("{}", im.id),
                image_path: root.join(&im.file_name),
                width: im.width as usize,
                height: im.height as usize,
                gt: Vec::new(),
            },
        );
    }
    for ann in &file.annotations {
        let scene = scenes.get_mut(&ann.image_id).ok_or_else(|| {
            Error::Validation(format!(
                "annotation {} references missing image {}",
                ann.id, ann.image_id
            ))
        })?;
        let [x, y, w, h] = ann.bbox;
        let bbox = BBox::from_xywh(x, y, w, h)
            .map_err(|e| Error::Validation(format!("annotation {}: {e}", ann.id)))?;
        if bbox.x0() < 0.0
            || bbox.y0() < 0.0
            || bbox.x1() > scene.width as f64
            || bbox.y1() > scene.height as f64
        {
            return Err(Error::Validation(format!(
                "annotation {}: box ({}, {}, {}, {}) outside {}x{} image",
                ann.id,
                bbox.x0(),
                bbox.y0(),
                bbox.x1(),
                bbox.y1(),
                scene.width,
                scene.height
            )));
        }
        let class_id = class_of(ann.category_id).ok_or_else(|| {
            Error::Validation(format!(
                "annotation {}: unknown category {}",
                ann.id, ann.category_id
            ))
        })?;
        scene.gt.push(LabeledBox::new(bbox, class_id));
    }
    Ok(Dataset {
        scenes: scenes.into_values().collect(),
        categories: names,
    })
}

/// Manifest tying the split files together.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    /// Split name -> annotation file path, relative to the manifest.
    pub splits: BTreeMap<String, String>,
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((manifest, root))
}

/// Load one split named in a manifest.
pub fn load_split(manifest_path: &Path, split: &str) -> Result<Dataset> {
    let (manifest, root) = load_manifest(manifest_path)?;
    let rel = manifest.splits.get(split).ok_or_else(|| {
        Error::Config(format!(
            "split '{split}' not in manifest (available: {})",
            manifest
                .splits
                .keys()
                .cloned()
                .collect::<Vec<_>>()
                .join(", ")
        ))
    })?;
    load_annotations(&root.join(rel))
}
