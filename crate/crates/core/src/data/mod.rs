//! Synthetic imbalanced detection datasets with a controllable class
//! ambiguity knob, plus COCO-style annotation ingestion.
//!
//! Every class sits on a 1-D morphology axis. Class `c`'s center is
//! `c * (1 - ambiguity)`: at ambiguity 0 per-class appearance distributions
//! are disjoint, at 1 adjacent class centers coincide. Appearance (hue, size,
//! eccentricity, nucleus size) is a smooth function of the sampled morphology
//! coordinate, so higher ambiguity means classes genuinely look alike.

pub mod coco;
pub mod render;

pub use coco::{load_annotations, load_manifest, load_split, Dataset, Manifest, SceneRef};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{BBox, LabeledBox};
use crate::rng::{rng_substream, stream};
use coco::{CocoAnnotation, CocoCategory, CocoFile, CocoImage};
use render::{paint_background, paint_cell, CellShape};

/// One image with its ground truth.
#[derive(Debug, Clone)]
pub struct DetectionScene {
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Array3<f64>,
    pub gt: Vec<LabeledBox>,
    pub scene_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    /// Relative class frequencies (positive; need not sum to 1).
    pub class_frequencies: Vec<f64>,
    /// 0 = disjoint class appearances, 1 = adjacent class centers coincide.
    pub ambiguity: f64,
    pub image_size: usize,
    /// (train, val, test) scene counts.
    pub scenes_per_split: (usize, usize, usize),
    pub seed: u64,
    pub min_cells: usize,
    pub max_cells: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            class_frequencies: vec![100.0, 50.0, 10.0, 2.0],
            ambiguity: 0.6,
            image_size: 128,
            scenes_per_split: (400, 50, 100),
            seed: 0,
            min_cells: 1,
            max_cells: 12,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.class_frequencies.len() != self.num_classes {
            return Err(Error::Config(format!(
                "need one frequency per class ({} classes, {} frequencies)",
                self.num_classes,
                self.class_frequencies.len()
            )));
        }
        if self.class_frequencies.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config("class frequencies must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Config(format!(
                "ambiguity must lie in [0, 1], got {}",
                self.ambiguity
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be at least 32".into()));
        }
        if self.min_cells > self.max_cells {
            return Err(Error::Config("min_cells > max_cells".into()));
        }
        Ok(())
    }

    /// Draw a class id proportional to the configured frequencies.
    pub fn sample_class<R: Rng>(&self, rng: &mut R) -> usize {
        let total: f64 = self.class_frequencies.iter().sum();
        let mut u = rng.random_range(0.0..total);
        for (c, f) in self.class_frequencies.iter().enumerate() {
            if u < *f {
                return c;
            }
            u -= f;
        }
        self.num_classes - 1
    }

    /// Center of class `c` on the morphology axis.
    pub fn morphology_center(&self, class_id: usize) -> f64 {
        class_id as f64 * (1.0 - self.ambiguity)
    }

    /// Per-instance morphology jitter half-width. Centers are 1 apart at
    /// ambiguity 0, so +-0.25 keeps distributions disjoint there.
    pub const MORPHOLOGY_JITTER: f64 = 0.25;

    /// Sample an instance's morphology coordinate for `class_id`.
    pub fn sample_morphology<R: Rng>(&self, class_id: usize, rng: &mut R) -> f64 {
        self.morphology_center(class_id)
            + rng.random_range(-Self::MORPHOLOGY_JITTER..Self::MORPHOLOGY_JITTER)
    }
}

/// Appearance parameters derived from a morphology coordinate.
fn appearance(spec: &DatasetSpec, theta: f64, rng: &mut impl Rng) -> CellShape {
    let base_radius = spec.image_size as f64 / 14.0;
    let radius = base_radius * (1.0 + 0.22 * theta);
    let ecc = (0.18 + 0.13 * theta).clamp(0.05, 0.6);
    CellShape {
        cx: 0.0,
        cy: 0.0,
        semi_major: radius * (1.0 + ecc),
        semi_minor: radius / (1.0 + ecc),
        angle: rng.random_range(0.0..std::f64::consts::PI),
        hue: 0.54 + 0.085 * theta,
        saturation: (0.30 + 0.06 * theta).clamp(0.0, 1.0),
        value: (0.72 - 0.04 * theta + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0),
        nucleus_ratio: (0.34 + 0.09 * theta).clamp(0.1, 0.75),
    }
}

/// Snap to the 1/64-pixel grid. Dyadic coordinates make box arithmetic exact
/// in f64, so annotations round-trip through the `[x, y, w, h]` JSON form
/// bit-for-bit.
fn q64(v: f64) -> f64 {
    (v * 64.0).round() / 64.0
}

/// Render one scene. Cell count, classes, appearances, and placement all come
/// from `rng`; cells are rejection-placed to bound mutual overlap and GT
/// boxes are the ellipses' tight bounding boxes.
pub fn generate_scene<R: Rng>(spec: &DatasetSpec, scene_id: &str, rng: &mut R) -> DetectionScene {
    let size = spec.image_size;
    let mut image = paint_background(size, rng);
    let n_cells = rng.random_range(spec.min_cells..=spec.max_cells);
    let mut gt: Vec<LabeledBox> = Vec::new();
    for _ in 0..n_cells {
        let class_id = spec.sample_class(rng);
        let theta = spec.sample_morphology(class_id, rng);
        let mut cell = appearance(spec, theta, rng);
        let (hx, hy) = cell.half_extents();
        let (hx, hy) = (q64(hx), q64(hy));
        let margin = 1.0;
        if 2.0 * hx + margin >= size as f64 || 2.0 * hy + margin >= size as f64 {
            continue;
        }
        let mut placed = false;
        for _ in 0..20 {
            let cx = q64(rng.random_range(hx + margin..size as f64 - hx - margin));
            let cy = q64(rng.random_range(hy + margin..size as f64 - hy - margin));
            let bbox = BBox::new(cx - hx, cy - hy, cx + hx, cy + hy).expect("positive extents");
            if gt.iter().all(|g| g.bbox.iou(&bbox) <= 0.4) {
                cell.cx = cx;
                cell.cy = cy;
                gt.push(LabeledBox::new(bbox, class_id));
                placed = true;
                break;
            }
        }
        if placed {
            paint_cell(&mut image, &cell);
        }
    }
    DetectionScene {
        image,
        gt,
        scene_id: scene_id.to_string(),
    }
}

fn image_to_rgb8(image: &Array3<f64>) -> image::RgbImage {
    let (_, h, w) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (image[[c, y as usize, x as usize]] * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Generate images plus one annotation file per split under `out_dir`;
/// returns the manifest path. Deterministic for a given spec (each scene has
/// its own derived RNG stream).
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let categories: Vec<CocoCategory> = (0..spec.num_classes)
        .map(|c| CocoCategory {
            id: c as i64,
            name: format!("class_{c}"),
        })
        .collect();
    let splits = [
        ("train", spec.scenes_per_split.0),
        ("val", spec.scenes_per_split.1),
        ("test", spec.scenes_per_split.2),
    ];
    let mut manifest = Manifest {
        num_classes: spec.num_classes,
        splits: Default::default(),
    };
    let mut global_index = 0u64;
    for (split, count) in splits {
        let mut file = CocoFile {
            images: Vec::with_capacity(count),
            annotations: Vec::new(),
            categories: categories.clone(),
        };
        let mut ann_id = 1u64;
        for i in 0..count {
            let scene_id = format!("{split}_{i:05}");
            let mut rng = rng_substream(spec.seed, stream::SCENE, global_index);
            global_index += 1;
            let scene = generate_scene(spec, &scene_id, &mut rng);
            let file_name = format!("images/{scene_id}.png");
            image_to_rgb8(&scene.image)
                .save(out_dir.join(&file_name))
                .map_err(|e| Error::Validation(format!("saving {file_name}: {e}")))?;
            file.images.push(CocoImage {
                id: i as u64 + 1,
                file_name,
                width: spec.image_size as u32,
                height: spec.image_size as u32,
            });
            for g in &scene.gt {
                let [x, y, w, h] = g.bbox.to_xywh();
                file.annotations.push(CocoAnnotation {
                    id: ann_id,
                    image_id: i as u64 + 1,
                    bbox: [x, y, w, h],
                    category_id: g.class_id as i64,
                    area: Some(w * h),
                });
                ann_id += 1;
            }
        }
        let ann_path = out_dir.join(format!("{split}.json"));
        let mut bytes = serde_json::to_vec_pretty(&file).expect("annotations serialize");
        bytes.push(b'\n');
        fs::write(&ann_path, bytes)?;
        manifest
            .splits
            .insert(split.to_string(), format!("{split}.json"));
    }
    let manifest_path = out_dir.join("manifest.json");
    coco::save_manifest(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            scenes_per_split: (4, 2, 2),
            image_size: 64,
            max_cells: 5,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn scene_boxes_inside_bounds_and_valid() {
        let spec = tiny_spec();
        for i in 0..20 {
            let mut rng = rng_substream(7, stream::SCENE, i);
            let scene = generate_scene(&spec, "s", &mut rng);
            for g in &scene.gt {
                assert!(g.class_id < spec.num_classes);
                assert!(g.bbox.x0() >= 0.0 && g.bbox.y0() >= 0.0);
                assert!(g.bbox.x1() <= 64.0 && g.bbox.y1() <= 64.0);
            }
            assert!(scene.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn ambiguity_zero_distributions_disjoint() {
        let spec = DatasetSpec {
            ambiguity: 0.0,
            num_classes: 2,
            class_frequencies: vec![1.0, 1.0],
            ..DatasetSpec::default()
        };
        let mut rng = rng_stream(3, stream::SCENE);
        let mut max0 = f64::NEG_INFINITY;
        let mut min1 = f64::INFINITY;
        for _ in 0..2000 {
            max0 = max0.max(spec.sample_morphology(0, &mut rng));
            min1 = min1.min(spec.sample_morphology(1, &mut rng));
        }
        assert!(max0 < min1, "morphology ranges overlap: {max0} vs {min1}");
    }

    #[test]
    fn ambiguity_one_centers_coincide() {
        let spec = DatasetSpec {
            ambiguity: 1.0,
            ..DatasetSpec::default()
        };
        for c in 0..spec.num_classes {
            assert_eq!(spec.morphology_center(c), 0.0);
        }
    }

    #[test]
    fn class_frequencies_converge() {
        let spec = DatasetSpec {
            num_classes: 2,
            class_frequencies: vec![100.0, 1.0],
            ..DatasetSpec::default()
        };
        let mut rng = rng_stream(4, stream::SCENE);
        let n = 10_000;
        let ones = (0..n).filter(|_| spec.sample_class(&mut rng) == 1).count();
        let frac = ones as f64 / n as f64;
        assert!(
            (frac - 1.0 / 101.0).abs() < 0.003,
            "class-1 fraction {frac}"
        );
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let spec = tiny_spec();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let m1 = generate_dataset(&spec, dir1.path()).unwrap();
        let m2 = generate_dataset(&spec, dir2.path()).unwrap();
        for split in ["train", "val", "test"] {
            let a = std::fs::read(dir1.path().join(format!("{split}.json"))).unwrap();
            let b = std::fs::read(dir2.path().join(format!("{split}.json"))).unwrap();
            assert_eq!(a, b, "{split}.json not byte-identical");
        }
        // PNGs byte-identical too.
        let p1 = std::fs::read(dir1.path().join("images/train_00000.png")).unwrap();
        let p2 = std::fs::read(dir2.path().join("images/train_00000.png")).unwrap();
        assert_eq!(p1, p2);

        let train = load_split(&m1, "train").unwrap();
        assert_eq!(train.scenes.len(), 4);
        assert_eq!(load_split(&m1, "val").unwrap().scenes.len(), 2);
        assert_eq!(load_split(&m2, "test").unwrap().scenes.len(), 2);
        assert_eq!(train.num_classes(), 4);

        //

        // Round trip: relabel boxes from the annotation file exactly.
        let ann: CocoFile = serde_json::from_str(
            &std::fs::read_to_string(dir1.path().join("train.json")).unwrap(),
        )
        .unwrap();
        let mut from_file: Vec<(u64, [f64; 4], i64)> = ann
            .annotations
            .iter()
            .map(|a| (a.image_id, a.bbox, a.category_id))
            .collect();
        let mut from_load: Vec<(u64, [f64; 4], i64)> = Vec::new();
        for (i, scene) in train.scenes.iter().enumerate() {
            for g in &scene.gt {
                let [x, y, w, h] = g.bbox.to_xywh();
                from_load.push((i as u64 + 1, [x, y, w, h], g.class_id as i64));
            }
        }
        from_file.sort_by(|a, b| a.partial_cmp(b).unwrap());
        from_load.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(from_file, from_load);

        // Images decode to the right shape.
        let img = train.scenes[0].load_image().unwrap();
        assert_eq!(img.dim(), (3, 64, 64));
    }

    #[test]
    fn load_rejects_bad_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, body: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, body).unwrap();
            p
        };
        // malformed json
        let p = write("bad.json", "{ not json");
        match load_annotations(&p) {
            Err(Error::Parse(msg)) => assert!(msg.contains("line"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
        // x1 <= x0 (zero width)
        let p = write(
            "degenerate.json",
            r#"{"images":[{"id":1,"file_name":"x.png","width":64,"height":64}],
                "annotations":[{"id":9,"image_id":1,"bbox":[10,10,0,5],"category_id":0}],
                "categories":[{"id":0,"name":"a"}]}"#,
        );
        match load_annotations(&p) {
            Err(Error::Validation(msg)) => assert!(msg.contains("annotation 9"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
        // out-of-bounds box names the annotation id
        let p = write(
            "oob.json",
            r#"{"images":[{"id":1,"file_name":"x.png","width":64,"height":64}],
                "annotations":[{"id":7,"image_id":1,"bbox":[60,10,10,5],"category_id":0}],
                "categories":[{"id":0,"name":"a"}]}"#,
        );
        match load_annotations(&p) {
            Err(Error::Validation(msg)) => assert!(msg.contains("annotation 7"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
        // empty annotation list is fine
        let p = write(
            "empty.json",
            r#"{"images":[],"annotations":[],"categories":[{"id":0,"name":"a"}]}"#,
        );
        let ds = load_annotations(&p).unwrap();
        assert!(ds.scenes.is_empty());
        // external-style 1-based non-contiguous category ids map by sort order
        let p = write(
            "external.json",
            r#"{"images":[{"id":1,"file_name":"x.png","width":64,"height":64}],
                "annotations":[{"id":1,"image_id":1,"bbox":[5,5,10,10],"category_id":7}],
                "categories":[{"id":3,"name":"low"},{"id":7,"name":"high"}]}"#,
        );
        let ds = load_annotations(&p).unwrap();
        assert_eq!(ds.scenes[0].gt[0].class_id, 1);
        assert_eq!(ds.categories, vec!["low".to_string(), "high".to_string()]);
    }
}
